//! Programmatic reward functions shared by text-to-image and editing.
//!
//! Each scores a generated token sequence against a target caption (the
//! prompt, or the synthesized description of the edited scene):
//! cosine alignment of count vectors, multiset F1, clause fraction, and a
//! binary all-clauses outcome. The ensemble is their mean.

use serde::{Deserialize, Serialize};

use crate::codec::decode_g;
use crate::error::Result;
use crate::world::{clause_check, expected_vector, feature_vector, Caption, Scene, NUM_TYPES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_c: f64,
    pub r_h: f64,
    pub r_u: f64,
    pub r_o: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Alignment,
    Preference,
    Consistency,
    Outcome,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Alignment, Component::Preference, Component::Consistency, Component::Outcome];
}

impl RewardVector {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Alignment => self.r_c,
            Component::Preference => self.r_h,
            Component::Consistency => self.r_u,
            Component::Outcome => self.r_o,
        }
    }

    /// Mean over a subset of components (reward-ablation runs).
    pub fn mean_of(&self, components: &[Component]) -> f64 {
        assert!(!components.is_empty(), "at least one reward component");
        components.iter().map(|&c| self.get(c)).sum::<f64>() / components.len() as f64
    }
}

pub fn ensemble(v: &RewardVector) -> f64 {
    (v.r_c + v.r_h + v.r_u + v.r_o) / 4.0
}

fn cosine01(a: &[f64; 14], b: &[f64; 14]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    ((dot / (na * nb)).clamp(-1.0, 1.0) + 1.0) / 2.0
}

pub fn reward_alignment_scene(scene: &Scene, target: &Caption) -> Result<f64> {
    Ok(cosine01(&feature_vector(scene), &expected_vector(target)?))
}

/// F1 between the generated object multiset and the caption-implied one.
pub fn reward_preference_scene(scene: &Scene, target: &Caption) -> Result<f64> {
    let want = expected_vector(target)?;
    let have = feature_vector(scene);
    let (mut overlap, mut n_want, mut n_have) = (0.0, 0.0, 0.0);
    for k in 0..NUM_TYPES {
        overlap += want[k].min(have[k]);
        n_want += want[k];
        n_have += have[k];
    }
    if n_want == 0.0 && n_have == 0.0 {
        return Ok(1.0);
    }
    if overlap == 0.0 {
        return Ok(0.0);
    }
    let (p, r) = (overlap / n_have, overlap / n_want);
    Ok(2.0 * p * r / (p + r))
}

pub fn reward_consistency_scene(scene: &Scene, target: &Caption) -> Result<f64> {
    let (sat, total) = clause_check(scene, target)?;
    Ok(sat as f64 / total as f64)
}

pub fn reward_outcome_scene(scene: &Scene, target: &Caption) -> Result<f64> {
    let (sat, total) = clause_check(scene, target)?;
    Ok(if sat == total { 1.0 } else { 0.0 })
}

pub fn score_scene(scene: &Scene, target: &Caption) -> Result<RewardVector> {
    Ok(RewardVector {
        r_c: reward_alignment_scene(scene, target)?,
        r_h: reward_preference_scene(scene, target)?,
        r_u: reward_consistency_scene(scene, target)?,
        r_o: reward_outcome_scene(scene, target)?,
    })
}

/// All four rewards of a generated token sequence; MASK is rejected.
pub fn score(generated: &[usize], target: &Caption) -> Result<RewardVector> {
    score_scene(&decode_g(generated)?, target)
}

pub fn reward_alignment(generated: &[usize], target: &Caption) -> Result<f64> {
    reward_alignment_scene(&decode_g(generated)?, target)
}

pub fn reward_preference(generated: &[usize], target: &Caption) -> Result<f64> {
    reward_preference_scene(&decode_g(generated)?, target)
}

pub fn reward_consistency(generated: &[usize], target: &Caption) -> Result<f64> {
    reward_consistency_scene(&decode_g(generated)?, target)
}

pub fn reward_outcome(generated: &[usize], target: &Caption) -> Result<f64> {
    reward_outcome_scene(&decode_g(generated)?, target)
}
