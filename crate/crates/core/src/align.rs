//! Edit instruction alignment: from the condition scene and an instruction,
//! predict the description of the edited result through the understanding
//! pathway.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unigrid_numerics::{OptimState, Real, Tensor};

use crate::codec::{caption_words, edit_words, encode_u, ids_to_words, parse_caption, words_to_ids, Word};
use crate::data::{id_rng, World, PROBE_BASE};
use crate::decoder::generate_text;
use crate::error::{contract, Error, Result};
use crate::model::{assemble_understanding, Layout, Model};
use crate::objectives::{train_step, Example, StepMetrics, Task};
use crate::schedule::{lr_at, LrSchedule};
use crate::world::{filter_edit, synthesize_target_description, Caption, Clause, EditInstruction, Scene};

/// Longest description the greedy decoder may emit.
pub const MAX_DESCRIPTION: usize = 48;

#[derive(Clone, Debug)]
pub struct AlignExample {
    pub x_u: Tensor<f64>,
    pub instruction: Vec<usize>,
    /// Serialized target description, without EOS.
    pub target_description: Vec<usize>,
    pub target: Caption,
}

impl AlignExample {
    /// `[x_u][instruction][description EOS]` with loss on the description.
    pub fn layout(&self, max_len: usize) -> Result<Layout> {
        let mut answer = self.target_description.clone();
        answer.push(Word::Eos.id());
        assemble_understanding(&self.x_u, &self.instruction, &answer, max_len)
    }
}

pub fn build_align_example(scene: &Scene, edit: &EditInstruction) -> Result<AlignExample> {
    if !filter_edit(scene, edit) {
        return contract(format!("edit {edit:?} is filtered out for this scene"));
    }
    let target = synthesize_target_description(scene, edit)?;
    Ok(AlignExample {
        x_u: encode_u(scene),
        instruction: words_to_ids(&edit_words(edit)),
        target_description: words_to_ids(&caption_words(&target)),
        target,
    })
}

/// `n` examples from the given id range, one random valid edit each.
pub fn build_align_dataset(world: &World, first_id: u64, n: usize, seed: u64) -> Result<Vec<AlignExample>> {
    (0..n as u64)
        .map(|i| {
            let id = first_id + i;
            let s = world.edit_sample(&mut id_rng(seed, id), id);
            build_align_example(&s.scene, &s.edit)
        })
        .collect()
}

/// Held-out examples from the probe id range.
pub fn heldout_align_set(world: &World, n: usize, seed: u64) -> Result<Vec<AlignExample>> {
    build_align_dataset(world, PROBE_BASE + (2 << 20), n, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    /// Training pairs (drawn from training scene ids).
    pub dataset_size: usize,
    pub heldout_size: usize,
    /// Exact-match evaluation every this many steps (0: only at the end).
    pub eval_every: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            steps: 500,
            batch_size: 64,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            warmup_steps: 0,
            grad_clip: 1.0,
            dataset_size: 2000,
            heldout_size: 200,
            eval_every: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.dataset_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("align steps, batch size, dataset size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Pure alignment batches with ar_loss, cosine LR; `on_step` sees each step.
pub fn train_align<T: Real, F: FnMut(&AlignMetrics, &Model<T>) -> Result<()>>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    dataset: &[AlignExample],
    cfg: &AlignConfig,
    seed: u64,
    mut on_step: F,
) -> Result<Vec<AlignMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return contract("empty alignment dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = model.config.max_seq_len;
    let mut out = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let ex = &dataset[rng.gen_range(0..dataset.len())];
                Ok(Example { task: Task::Align, layout: ex.layout(max_len)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = lr_at(cfg.schedule, cfg.lr, step, cfg.steps, cfg.warmup_steps);
        let m: StepMetrics = train_step(model, optim, &batch, lr, cfg.grad_clip)?;
        let metrics = AlignMetrics { step, loss: m.loss_total, lr };
        on_step(&metrics, model)?;
        out.push(metrics);
    }
    Ok(out)
}

/// Greedy description for one example.
pub fn predict_description<T: Real>(model: &Model<T>, ex: &AlignExample) -> Result<Vec<usize>> {
    generate_text(model, &ex.x_u, &ex.instruction, MAX_DESCRIPTION)
}

/// Clauses recoverable from a possibly malformed word sequence: each
/// comma-separated chunk that parses on its own.
pub fn salvage_clauses(ids: &[usize]) -> Vec<Clause> {
    let Ok(words) = ids_to_words(ids) else { return Vec::new() };
    words
        .split(|w| *w == Word::Comma)
        .filter_map(|chunk| parse_caption(chunk).ok())
        .filter(|c| c.clauses.len() == 1)
        .map(|c| c.clauses[0])
        .collect()
}

/// Clause accuracy of one prediction: matched clauses over the larger of
/// the two clause counts (so extra clauses cost as much as missing ones).
pub fn clause_score(predicted: &[usize], target: &Caption) -> f64 {
    let mut pred = salvage_clauses(predicted);
    let denom = pred.len().max(target.clauses.len());
    if denom == 0 {
        return 1.0;
    }
    let mut matched = 0;
    for c in &target.clauses {
        if let Some(i) = pred.iter().position(|p| p == c) {
            pred.swap_remove(i);
            matched += 1;
        }
    }
    matched as f64 / denom as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignEval {
    pub exact_match: f64,
    pub clause_accuracy: f64,
}

/// Scores predictions produced by `predict` against each example's oracle.
pub fn eval_align_with<F: FnMut(&AlignExample) -> Result<Vec<usize>>>(
    heldout: &[AlignExample],
    mut predict: F,
) -> Result<AlignEval> {
    if heldout.is_empty() {
        return contract("empty held-out set");
    }
    let (mut exact, mut clause) = (0.0, 0.0);
    for ex in heldout {
        let pred = predict(ex)?;
        exact += (pred == ex.target_description) as u8 as f64;
        clause += clause_score(&pred, &ex.target);
    }
    let n = heldout.len() as f64;
    Ok(AlignEval { exact_match: exact / n, clause_accuracy: clause / n })
}

pub fn eval_align<T: Real>(model: &Model<T>, heldout: &[AlignExample]) -> Result<AlignEval> {
    eval_align_with(heldout, |ex| predict_description(model, ex))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_text, parse_words};
    use crate::data::DataConfig;
    use crate::model::{ModelConfig, SegKind};
    use crate::world::{describe, Background, Clause};
    use unigrid_numerics::{AdamHyper, AdamW};

    fn world() -> World {
        World::new(DataConfig::default()).unwrap()
    }

    #[test]
    fn examples_round_trip_and_carry_loss_on_description_only() {
        let w = world();
        let data = build_align_dataset(&w, 0, 50, 1).unwrap();
        for ex in &data {
            let words = ids_to_words(&ex.target_description).unwrap();
            assert_eq!(parse_caption(&words).unwrap(), ex.target);
            let layout = ex.layout(224).unwrap();
            let desc = layout.positions_of(SegKind::GenText);
            assert_eq!(desc.len(), ex.target_description.len() + 1);
            assert_eq!(layout.loss_positions(), desc.len());
            assert_eq!(*layout.targets_of(SegKind::GenText).last().unwrap(), Word::Eos.id());
        }
    }

    #[test]
    fn background_edit_changes_only_the_background_clause() {
        let w = world();
        for id in 0..50 {
            let scene = w.scene(id);
            let color = match scene.background {
                Background::Black => Background::White,
                Background::White => Background::Black,
            };
            let ex = build_align_example(&scene, &EditInstruction::SetBackground { color }).unwrap();
            let before = describe(&scene).clauses;
            let after = &ex.target.clauses;
            assert_eq!(before.len(), after.len());
            let diffs: Vec<_> = before.iter().zip(after).filter(|(a, b)| a != b).collect();
            assert_eq!(diffs.len(), 1);
            assert!(matches!(diffs[0].1, Clause::Background(b) if *b == color));
        }
        let scene = w.scene(0);
        let noop = EditInstruction::SetBackground { color: scene.background };
        assert!(build_align_example(&scene, &noop).is_err());
    }

    #[test]
    fn oracle_and_degenerate_predictors() {
        let w = world();
        let data = heldout_align_set(&w, 30, 2).unwrap();
        let oracle = eval_align_with(&data, |ex| Ok(ex.target_description.clone())).unwrap();
        assert_eq!(oracle, AlignEval { exact_match: 1.0, clause_accuracy: 1.0 });
        let empty = eval_align_with(&data, |_| Ok(Vec::new())).unwrap();
        assert_eq!(empty.exact_match, 0.0);
        let m = Model::<f32>::new(ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, ..ModelConfig::default() }, 1).unwrap();
        let untrained = eval_align(&m, &data[..5]).unwrap();
        assert!(untrained.exact_match <= 0.2);
        assert!(untrained.clause_accuracy >= untrained.exact_match);
    }

    #[test]
    fn clause_accuracy_dominates_exact_match() {
        let w = world();
        let data = heldout_align_set(&w, 40, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        // corrupt predictions: drop, swap or keep words at random
        let eval = eval_align_with(&data, |ex| {
            let mut p = ex.target_description.clone();
            match r.gen_range(0..3) {
                0 => {
                    p.pop();
                }
                1 => {
                    let n = p.len();
                    p.swap(0, n - 1);
                }
                _ => {}
            }
            Ok(p)
        })
        .unwrap();
        assert!(eval.clause_accuracy >= eval.exact_match);
        assert!(eval.exact_match < 1.0);
        let partial = words_to_ids(&parse_words("one red circle , background black , two blue").unwrap());
        let target = Caption::new(vec![
            Clause::Count { n: 1, obj: crate::world::ObjType::from_index(0) },
            Clause::Background(Background::White),
        ]);
        assert_eq!(clause_score(&partial, &target), 0.5);
        assert_eq!(decode_text(&partial).unwrap()[0], "one");
    }

    #[test]
    fn training_reduces_loss() {
        let w = world();
        let data = build_align_dataset(&w, 0, 8, 5).unwrap();
        let mut m = Model::<f32>::new(ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, ..ModelConfig::default() }, 2).unwrap();
        let mut opt = AdamW::init(&m.params, AdamHyper::default()).unwrap();
        let cfg = AlignConfig { steps: 60, batch_size: 4, lr: 3e-3, ..AlignConfig::default() };
        let metrics = train_align(&mut m, &mut opt, &data, &cfg, 1, |_, _| Ok(())).unwrap();
        let head = metrics[..10].iter().map(|m| m.loss).sum::<f64>();
        let tail = metrics[50..].iter().map(|m| m.loss).sum::<f64>();
        assert!(tail < head);
        // image embeddings feed only generation and x_g: alignment sends them no gradient
        let batch: Vec<Example> =
            data.iter().map(|ex| Example { task: Task::Align, layout: ex.layout(224).unwrap() }).collect();
        let (g, _) = crate::objectives::batch_gradients(&m, &batch).unwrap();
        let id = m.params.id("image_emb").unwrap();
        assert!(g.get(id).iter().all(|&x| x == 0.0));
    }
}
