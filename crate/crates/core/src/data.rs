//! Deterministic data pools. Every scene is a pure function of
//! `(world_seed, id)`; training, probe and evaluation material come from
//! disjoint id ranges.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{
    describe, gen_vqa, make_edit, sample_scene, synthesize_target_description, Caption, Clause,
    EditInstruction, ObjType, Relation, Scene, VqaItem, MAX_OBJECTS,
};

/// First id of the probe range (RL probes, alignment held-out).
pub const PROBE_BASE: u64 = 1 << 40;
/// First id of the evaluation range.
pub const EVAL_BASE: u64 = 2 << 40;
/// Prompts never exceed this many clauses.
pub const MAX_PROMPT_CLAUSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Probe,
    Eval,
}

impl Split {
    pub fn of(id: u64) -> Split {
        if id >= EVAL_BASE {
            Split::Eval
        } else if id >= PROBE_BASE {
            Split::Probe
        } else {
            Split::Train
        }
    }

    pub fn base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Probe => PROBE_BASE,
            Split::Eval => EVAL_BASE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub world_seed: u64,
    /// Number of training scenes (ids `0..train_scenes`).
    pub train_scenes: u64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { world_seed: 17, train_scenes: 20_000, min_objects: 0, max_objects: MAX_OBJECTS }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.train_scenes >= PROBE_BASE {
            return Err(Error::Config(format!("train_scenes {} out of range", self.train_scenes)));
        }
        if self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!("object bounds {}..={}", self.min_objects, self.max_objects)));
        }
        Ok(())
    }
}

/// Per-id RNG: the world seed picks the key, the id picks the stream.
pub fn id_rng(world_seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(world_seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: DataConfig,
}

/// One editing triple: condition scene, instruction, oracle result and its description.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub scene_id: u64,
    pub scene: Scene,
    pub edit: EditInstruction,
    pub target: Scene,
    pub target_caption: Caption,
}

impl World {
    pub fn new(config: DataConfig) -> Result<Self> {
        config.validate()?;
        Ok(World { config })
    }

    pub fn scene(&self, id: u64) -> Scene {
        sample_scene(&mut id_rng(self.config.world_seed, id), self.config.min_objects, self.config.max_objects)
    }

    pub fn random_train_id<R: Rng>(&self, rng: &mut R) -> u64 {
        rng.gen_range(0..self.config.train_scenes)
    }

    pub fn edit_sample<R: Rng>(&self, rng: &mut R, scene_id: u64) -> EditSample {
        let scene = self.scene(scene_id);
        let edit = make_edit(rng, &scene);
        let target_caption = synthesize_target_description(&scene, &edit).expect("make_edit yields valid edits");
        let target = crate::world::apply_edit(&scene, &edit).expect("valid edit");
        EditSample { scene_id, scene, edit, target, target_caption }
    }

    pub fn vqa<R: Rng>(&self, rng: &mut R, scene_id: u64) -> VqaItem {
        gen_vqa(rng, &self.scene(scene_id), scene_id)
    }
}

/// Every Relation clause that holds between a pair of objects of distinct types.
pub fn true_relations(scene: &Scene) -> Vec<Clause> {
    let objs: Vec<(usize, ObjType)> = scene.objects().collect();
    let mut out = Vec::new();
    for &(ca, a) in &objs {
        for &(cb, b) in &objs {
            if a == b {
                continue;
            }
            for relation in Relation::ALL {
                let clause = Clause::Relation { subject: a, relation, object: b };
                if relation.holds(ca, cb) && !out.contains(&clause) {
                    out.push(clause);
                }
            }
        }
    }
    out
}

/// A text-to-image prompt the scene satisfies: 1..=4 clauses drawn from its
/// Count and Background clauses and at most one true relation, kept in
/// canonical order (counts, relation, background).
pub fn sample_prompt<R: Rng>(rng: &mut R, scene: &Scene) -> Caption {
    let full = describe(scene);
    let mut pool: Vec<Clause> = full.clauses.iter().copied().filter(|c| matches!(c, Clause::Count { .. })).collect();
    let background = *full.clauses.last().expect("describe always ends with the background");
    let relations = true_relations(scene);
    if !relations.is_empty() {
        pool.push(relations[rng.gen_range(0..relations.len())]);
    }
    pool.push(background);
    let k = rng.gen_range(1..=pool.len().min(MAX_PROMPT_CLAUSES));
    let mut picked = sample(rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    Caption::new(picked.into_iter().map(|i| pool[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{clause_check, filter_edit};

    #[test]
    fn scenes_are_pure_functions_of_id() {
        let w = World::new(DataConfig::default()).unwrap();
        assert_eq!(w.scene(5), w.scene(5));
        assert_ne!((0..20).map(|i| w.scene(i)).collect::<Vec<_>>(), (20..40).map(|i| w.scene(i)).collect::<Vec<_>>());
        let other = World::new(DataConfig { world_seed: 18, ..DataConfig::default() }).unwrap();
        assert_ne!((0..10).map(|i| w.scene(i)).collect::<Vec<_>>(), (0..10).map(|i| other.scene(i)).collect::<Vec<_>>());
        assert_eq!(Split::of(3), Split::Train);
        assert_eq!(Split::of(PROBE_BASE + 3), Split::Probe);
        assert_eq!(Split::of(EVAL_BASE), Split::Eval);
    }

    #[test]
    fn prompts_are_satisfied_by_their_scene() {
        let w = World::new(DataConfig::default()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for id in 0..3_000 {
            let s = w.scene(id);
            let p = sample_prompt(&mut r, &s);
            assert!((1..=MAX_PROMPT_CLAUSES).contains(&p.clauses.len()));
            p.validate().unwrap();
            let (sat, tot) = clause_check(&s, &p).unwrap();
            assert_eq!(sat, tot);
            let e = w.edit_sample(&mut r, id);
            assert!(filter_edit(&e.scene, &e.edit));
        }
    }
}
