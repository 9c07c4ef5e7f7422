//! Iterative masked-token decoding with classifier-free guidance, plus greedy
//! text decoding for the understanding pathway.
//!
//! Decoding starts from an all-MASK image. Each step samples a token for every
//! masked position from the guided distribution, commits the most confident
//! ones per the cosine keep schedule, and re-masks the rest. Every commit is
//! traced with its log-probability under the unguided full-condition branch.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unigrid_numerics::{log_softmax_row, Real, Tensor};

use crate::codec::{Word, IMAGE_CLASSES, IMAGE_VOCAB, MASK, TEXT_VOCAB};
use crate::error::{contract, Error, Result};
use crate::model::{
    assemble_edit, assemble_t2i, assemble_understanding, CondOrder, EditConditions, Layout, Model, Segment,
};
use crate::world::CELLS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    None,
    T2i,
    Edit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub steps: usize,
    pub temperature: f64,
    pub cfg_mode: CfgMode,
    /// Text-to-image guidance scale.
    pub s: f64,
    /// Editing text guidance scale.
    pub s_t: f64,
    /// Editing image guidance scale.
    pub s_i: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { steps: 50, temperature: 1.0, cfg_mode: CfgMode::None, s: 5.0, s_t: 3.0, s_i: 1.5, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > CELLS {
            return Err(Error::Config(format!("decode steps {} outside 1..=64", self.steps)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// Evaluation defaults for a task: 50 steps with the task's guidance.
    pub fn guided(mode: CfgMode, seed: u64) -> Self {
        DecodeConfig { cfg_mode: mode, seed, ..Self::default() }
    }

    /// RL sampling: 16 steps, no guidance.
    pub fn rl(seed: u64) -> Self {
        DecodeConfig { steps: 16, cfg_mode: CfgMode::None, seed, ..Self::default() }
    }
}

/// Positions committed at each of `steps` steps: after step t the masked
/// count is `floor(len·γ(t/T))`; a zero step borrows one commit from the largest.
pub fn keep_counts(steps: usize, len: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > len {
        return contract(format!("{steps} steps for length {len}"));
    }
    let masked_after = |t: usize| -> usize {
        if t >= steps {
            0
        } else {
            (len as f64 * (FRAC_PI_2 * t as f64 / steps as f64).cos()).floor() as usize
        }
    };
    let mut counts: Vec<usize> = (1..=steps).map(|t| masked_after(t - 1) - masked_after(t)).collect();
    while let Some(zero) = counts.iter().position(|&c| c == 0) {
        let (big, _) = counts.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).expect("nonempty");
        counts[big] -= 1;
        counts[zero] += 1;
    }
    Ok(counts)
}

/// `l_u + s·(l_c − l_u)`.
pub fn cfg_t2i<T: Real>(l_uncond: &[T], l_cond: &[T], s: f64) -> Vec<T> {
    assert_eq!(l_uncond.len(), l_cond.len(), "guidance operands must match");
    let s = T::c(s);
    l_uncond.iter().zip(l_cond).map(|(&u, &c)| u + s * (c - u)).collect()
}

/// `l_000 + s_I·(l_U0G − l_000) + s_T·(l_UTG − l_U0G)`.
pub fn cfg_edit<T: Real>(l_000: &[T], l_u0g: &[T], l_utg: &[T], s_i: f64, s_t: f64) -> Vec<T> {
    assert!(l_000.len() == l_u0g.len() && l_u0g.len() == l_utg.len(), "guidance operands must match");
    let (si, st) = (T::c(s_i), T::c(s_t));
    (0..l_000.len()).map(|k| l_000[k] + si * (l_u0g[k] - l_000[k]) + st * (l_utg[k] - l_u0g[k])).collect()
}

/// Generation condition.
#[derive(Clone, Debug)]
pub enum Condition {
    T2i { prompt: Vec<usize> },
    Edit { x_u: Tensor<f64>, instruction: Vec<usize>, x_g: Vec<usize>, order: CondOrder },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// All conditions present.
    Full,
    /// No conditions at all.
    Empty,
    /// Editing with the instruction dropped.
    ImageOnly,
}

impl Condition {
    pub fn layout(&self, tokens: &[usize], branch: Branch, max_len: usize) -> Result<Layout> {
        match (self, branch) {
            (Condition::T2i { prompt }, Branch::Full) => assemble_t2i(prompt, tokens, None, max_len),
            (Condition::T2i { .. }, Branch::Empty) => assemble_t2i(&[], tokens, None, max_len),
            (Condition::T2i { .. }, Branch::ImageOnly) => contract("text-to-image has no image-only branch"),
            (Condition::Edit { x_u, instruction, x_g, order }, branch) => {
                let cond = match branch {
                    Branch::Full => EditConditions { x_u: Some(x_u), instruction: Some(instruction), x_g: Some(x_g) },
                    Branch::ImageOnly => EditConditions { x_u: Some(x_u), instruction: None, x_g: Some(x_g) },
                    Branch::Empty => EditConditions::default(),
                };
                assemble_edit(&cond, tokens, None, *order, max_len)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub position: usize,
    pub token: usize,
    pub logprob: f64,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub tokens: Vec<usize>,
    pub committed: Vec<bool>,
    pub step_index: usize,
    pub trace: Vec<TraceEntry>,
}

impl DecodeState {
    pub fn start() -> Self {
        DecodeState { tokens: vec![MASK; CELLS], committed: vec![false; CELLS], step_index: 0, trace: Vec::new() }
    }

    pub fn masked(&self) -> usize {
        self.committed.iter().filter(|&&c| !c).count()
    }
}

/// The token buffer a trace saw at the start of `step`: positions committed
/// earlier carry their final token, everything else is MASK.
pub fn context_at(trace: &[TraceEntry], step: usize) -> Vec<usize> {
    let mut tokens = vec![MASK; CELLS];
    for e in trace.iter().filter(|e| e.step < step) {
        tokens[e.position] = e.token;
    }
    tokens
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    t.data().chunks(IMAGE_VOCAB).map(|r| r.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()).collect()
}

/// Guided logits and unguided full-condition logits for the current buffer.
pub fn guided_logits<T: Real>(
    model: &Model<T>,
    tokens: &[usize],
    cond: &Condition,
    cfg: &DecodeConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let max = model.config.max_seq_len;
    let full = rows(&model.image_logits(&cond.layout(tokens, Branch::Full, max)?)?);
    let guided = match (cfg.cfg_mode, cond) {
        (CfgMode::None, _) => full.clone(),
        (CfgMode::T2i, Condition::T2i { .. }) => {
            let u = rows(&model.image_logits(&cond.layout(tokens, Branch::Empty, max)?)?);
            u.iter().zip(&full).map(|(u, c)| cfg_t2i(u, c, cfg.s)).collect()
        }
        (CfgMode::Edit, Condition::Edit { .. }) => {
            let l000 = rows(&model.image_logits(&cond.layout(tokens, Branch::Empty, max)?)?);
            let lu0g = rows(&model.image_logits(&cond.layout(tokens, Branch::ImageOnly, max)?)?);
            (0..CELLS).map(|i| cfg_edit(&l000[i], &lu0g[i], &full[i], cfg.s_i, cfg.s_t)).collect()
        }
        (mode, _) => return contract(format!("guidance mode {mode:?} does not match the condition")),
    };
    Ok((guided, full))
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total; fall back to the last nonzero class
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// One decoding step committing `commit` positions.
pub fn decode_step<T: Real, R: Rng>(
    model: &Model<T>,
    state: &mut DecodeState,
    cond: &Condition,
    cfg: &DecodeConfig,
    commit: usize,
    rng: &mut R,
) -> Result<()> {
    let masked: Vec<usize> = (0..CELLS).filter(|&i| !state.committed[i]).collect();
    if masked.is_empty() {
        return contract("decode step on a complete sequence");
    }
    let (guided, full) = guided_logits(model, &state.tokens, cond, cfg)?;
    let inv_t = 1.0 / cfg.temperature;
    let mut candidates = Vec::with_capacity(masked.len());
    for &pos in &masked {
        let scaled: Vec<f64> = guided[pos][..IMAGE_CLASSES].iter().map(|&l| l * inv_t).collect();
        let probs: Vec<f64> = log_softmax_row(&scaled, IMAGE_CLASSES).iter().map(|l| l.exp()).collect();
        let token = sample_index(rng, &probs);
        let logprob = log_softmax_row(&full[pos], IMAGE_CLASSES)[token];
        if !logprob.is_finite() || !probs[token].is_finite() {
            return Err(unigrid_numerics::NumericsError::Numeric("non-finite decoding distribution".into()).into());
        }
        candidates.push((pos, token, probs[token], logprob));
    }
    // highest confidence first; ties by position
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let step = state.step_index;
    for &(pos, token, _, logprob) in candidates.iter().take(commit.min(masked.len())) {
        state.tokens[pos] = token;
        state.committed[pos] = true;
        state.trace.push(TraceEntry { position: pos, token, logprob, step });
    }
    state.step_index += 1;
    Ok(())
}

/// Full decode from all-MASK; returns the finalized tokens and the trace.
pub fn generate<T: Real>(model: &Model<T>, cond: &Condition, cfg: &DecodeConfig) -> Result<(Vec<usize>, Vec<TraceEntry>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_with_rng(model, cond, cfg, &mut rng)
}

pub fn generate_with_rng<T: Real, R: Rng>(
    model: &Model<T>,
    cond: &Condition,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<TraceEntry>)> {
    let counts = keep_counts(cfg.steps, CELLS)?;
    let mut state = DecodeState::start();
    for &k in &counts {
        decode_step(model, &mut state, cond, cfg, k, rng)?;
    }
    debug_assert_eq!(state.masked(), 0);
    Ok((state.tokens, state.trace))
}

/// Greedy text answer after `[x_u][question]`, stopping at EOS or `max_tokens`.
/// The EOS itself is not returned.
pub fn generate_text<T: Real>(
    model: &Model<T>,
    x_u: &Tensor<f64>,
    question: &[usize],
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let base = assemble_understanding(x_u, question, &[], model.config.max_seq_len)?;
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let mut layout = base.clone();
        layout.segments.push(Segment::text_prompt(&out));
        if layout.len() > model.config.max_seq_len {
            break;
        }
        let logits = model.next_token_logits(&layout)?;
        let next = (0..TEXT_VOCAB)
            .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
            .expect("nonempty vocabulary");
        if next == Word::Eos.id() {
            break;
        }
        out.push(next);
    }
    Ok(out)
}
