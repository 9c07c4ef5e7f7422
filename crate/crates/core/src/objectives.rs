//! Training objectives and batch construction: masked token prediction under
//! the cosine schedule, next-token text loss, condition dropout, and the
//! per-stage task mix.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unigrid_numerics::{clip_grad_norm, AdamW, Gradients, OptimState, Real, Tape, Var};

use crate::codec::{caption_words, edit_words, encode_g, encode_u, words_to_ids, Word, MASK};
use crate::data::{sample_prompt, World};
use crate::error::{contract, Error, Result};
use crate::model::{
    assemble_edit, assemble_t2i, assemble_text, assemble_understanding, CondOrder, EditConditions, Layout, Model,
    SegKind,
};
use crate::world::{describe, CELLS};

/// γ(r) = cos(πr/2), with the endpoints pinned exactly.
pub fn gamma(r: f64) -> f64 {
    if r <= 0.0 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        (FRAC_PI_2 * r).cos()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub min_masked: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { min_masked: 1 }
    }
}

/// `max(min_masked, round(η·len))`, capped at `len`.
pub fn masked_count(eta: f64, len: usize, min_masked: usize) -> usize {
    ((eta * len as f64).round() as usize).max(min_masked).min(len)
}

/// Mask for a given draw `r`; positions chosen uniformly without replacement.
pub fn sample_mask_at<R: Rng>(rng: &mut R, len: usize, cfg: &MaskingConfig, r: f64) -> (Vec<bool>, f64) {
    let eta = gamma(r);
    let k = masked_count(eta, len, cfg.min_masked);
    let mut mask = vec![false; len];
    for i in sample(rng, len, k) {
        mask[i] = true;
    }
    (mask, eta)
}

pub fn sample_mask<R: Rng>(rng: &mut R, len: usize, cfg: &MaskingConfig) -> (Vec<bool>, f64) {
    let r = rng.gen::<f64>();
    sample_mask_at(rng, len, cfg, r)
}

pub fn apply_mask(tokens: &[usize], mask: &[bool]) -> Vec<usize> {
    tokens.iter().zip(mask).map(|(&t, &m)| if m { MASK } else { t }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutConfig {
    pub p_text: f64,
    pub p_xu: f64,
    pub p_xg: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { p_text: 0.10, p_xu: 0.50, p_xg: 0.10 }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [self.p_text, self.p_xu, self.p_xg] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenTask {
    T2i,
    Edit,
}

/// Which conditions survive dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Kept {
    pub text: bool,
    pub x_u: bool,
    pub x_g: bool,
}

/// Independent Bernoulli drops; image conditions only exist for editing.
pub fn apply_condition_dropout<R: Rng>(rng: &mut R, task: GenTask, cfg: &DropoutConfig) -> Kept {
    let text = !rng.gen_bool(cfg.p_text);
    match task {
        GenTask::T2i => Kept { text, x_u: false, x_g: false },
        GenTask::Edit => Kept { text, x_u: !rng.gen_bool(cfg.p_xu), x_g: !rng.gen_bool(cfg.p_xg) },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    T2i,
    Edit,
    Caption,
    Vqa,
    Text,
    Align,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::T2i => "t2i",
            Task::Edit => "edit",
            Task::Caption => "caption",
            Task::Vqa => "vqa",
            Task::Text => "text",
            Task::Align => "align",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(self, Task::T2i | Task::Edit)
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub task: Task,
    pub layout: Layout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStage {
    Pretrain,
    Sft,
}

/// Per-batch composition over (generation, image understanding, text understanding).
#[derive(Clone, Debug, PartialEq)]
pub struct StageMix {
    pub stage: MixStage,
    pub ratios: [usize; 3],
    pub round_robin_gen: bool,
}

impl StageMix {
    pub fn pretrain() -> Self {
        StageMix { stage: MixStage::Pretrain, ratios: [3, 2, 1], round_robin_gen: false }
    }

    pub fn sft() -> Self {
        StageMix { stage: MixStage::Sft, ratios: [3, 4, 1], round_robin_gen: true }
    }

    /// Slot counts for one batch.
    pub fn slots(&self, batch_size: usize) -> Result<[usize; 3]> {
        let total: usize = self.ratios.iter().sum();
        if self.ratios.contains(&0) || batch_size == 0 || batch_size % total != 0 {
            return Err(Error::Config(format!("batch size {batch_size} not divisible by ratio sum {total}")));
        }
        let k = batch_size / total;
        Ok(self.ratios.map(|r| r * k))
    }

    /// Generation task for a batch index: SFT alternates t2i and edit.
    pub fn gen_task(&self, batch_index: u64) -> GenTask {
        if self.round_robin_gen && batch_index % 2 == 1 {
            GenTask::Edit
        } else {
            GenTask::T2i
        }
    }
}

/// Builds task examples from the training split of a [`World`].
#[derive(Clone, Debug)]
pub struct ExampleBuilder<'a> {
    pub world: &'a World,
    pub max_len: usize,
    pub masking: MaskingConfig,
    pub dropout: DropoutConfig,
    pub order: CondOrder,
}

fn with_eos(mut ids: Vec<usize>) -> Vec<usize> {
    ids.push(Word::Eos.id());
    ids
}

impl ExampleBuilder<'_> {
    pub fn t2i<R: Rng>(&self, rng: &mut R) -> Result<Example> {
        let scene = self.world.scene(self.world.random_train_id(rng));
        let prompt = words_to_ids(&caption_words(&sample_prompt(rng, &scene)));
        let kept = apply_condition_dropout(rng, GenTask::T2i, &self.dropout);
        let clean = encode_g(&scene);
        let (mask, _) = sample_mask(rng, CELLS, &self.masking);
        let prompt: &[usize] = if kept.text { &prompt } else { &[] };
        let layout = assemble_t2i(prompt, &apply_mask(&clean, &mask), Some(&clean), self.max_len)?;
        Ok(Example { task: Task::T2i, layout })
    }

    pub fn edit<R: Rng>(&self, rng: &mut R) -> Result<Example> {
        let id = self.world.random_train_id(rng);
        let sample = self.world.edit_sample(rng, id);
        let kept = apply_condition_dropout(rng, GenTask::Edit, &self.dropout);
        let x_u = encode_u::<f64>(&sample.scene);
        let x_g = encode_g(&sample.scene);
        let instruction = words_to_ids(&edit_words(&sample.edit));
        let cond = EditConditions {
            x_u: kept.x_u.then_some(&x_u),
            instruction: kept.text.then_some(instruction.as_slice()),
            x_g: kept.x_g.then_some(x_g.as_slice()),
        };
        let clean = encode_g(&sample.target);
        let (mask, _) = sample_mask(rng, CELLS, &self.masking);
        let layout = assemble_edit(&cond, &apply_mask(&clean, &mask), Some(&clean), self.order, self.max_len)?;
        Ok(Example { task: Task::Edit, layout })
    }

    pub fn caption<R: Rng>(&self, rng: &mut R) -> Result<Example> {
        let scene = self.world.scene(self.world.random_train_id(rng));
        let answer = with_eos(words_to_ids(&caption_words(&describe(&scene))));
        let layout = assemble_understanding(&encode_u(&scene), &[], &answer, self.max_len)?;
        Ok(Example { task: Task::Caption, layout })
    }

    pub fn vqa<R: Rng>(&self, rng: &mut R) -> Result<Example> {
        let id = self.world.random_train_id(rng);
        let item = self.world.vqa(rng, id);
        let scene = self.world.scene(id);
        let answer = with_eos(words_to_ids(&item.answer));
        let layout = assemble_understanding(&encode_u(&scene), &words_to_ids(&item.question), &answer, self.max_len)?;
        Ok(Example { task: Task::Vqa, layout })
    }

    /// Caption text alone, as a language-modelling sequence.
    pub fn text<R: Rng>(&self, rng: &mut R) -> Result<Example> {
        let scene = self.world.scene(self.world.random_train_id(rng));
        let text = with_eos(words_to_ids(&caption_words(&describe(&scene))));
        Ok(Example { task: Task::Text, layout: assemble_text(&text, self.max_len)? })
    }

    /// One batch with exact stage ratios. Pretraining understands images by
    /// captioning; SFT uses VQA in three of every four understanding slots.
    pub fn batch<R: Rng>(&self, rng: &mut R, mix: &StageMix, batch_size: usize, batch_index: u64) -> Result<Vec<Example>> {
        let [gen, und, text] = mix.slots(batch_size)?;
        let mut out = Vec::with_capacity(batch_size);
        let gen_task = mix.gen_task(batch_index);
        for _ in 0..gen {
            out.push(match gen_task {
                GenTask::T2i => self.t2i(rng)?,
                GenTask::Edit => self.edit(rng)?,
            });
        }
        for i in 0..und {
            out.push(match mix.stage {
                MixStage::Sft if i % 4 != 3 => self.vqa(rng)?,
                _ => self.caption(rng)?,
            });
        }
        for _ in 0..text {
            out.push(self.text(rng)?);
        }
        Ok(out)
    }
}

/// Masked-token cross-entropy over the generation image segment.
pub fn mtp_loss<T: Real>(model: &Model<T>, tape: &mut Tape<T>, layout: &Layout) -> Result<Var> {
    let rows = layout.positions_of(SegKind::GenImage);
    let mask = layout.loss_mask_of(SegKind::GenImage);
    if !mask.iter().any(|&m| m) {
        return contract("masked token loss needs at least one masked position");
    }
    let h = model.trunk(tape, layout, Default::default())?;
    let logits = model.image_head(tape, h, &rows)?;
    Ok(tape.cross_entropy_masked(logits, &layout.targets_of(SegKind::GenImage), &mask)?)
}

/// Teacher-forced next-token cross-entropy over generated text.
pub fn ar_loss<T: Real>(model: &Model<T>, tape: &mut Tape<T>, layout: &Layout) -> Result<Var> {
    let rows = layout.positions_of(SegKind::GenText);
    let mask = layout.loss_mask_of(SegKind::GenText);
    if !mask.iter().any(|&m| m) {
        return contract("text loss needs at least one target position");
    }
    let h = model.trunk(tape, layout, Default::default())?;
    let logits = model.text_head(tape, h, &rows)?;
    Ok(tape.cross_entropy_masked(logits, &layout.targets_of(SegKind::GenText), &mask)?)
}

pub fn example_loss<T: Real>(model: &Model<T>, tape: &mut Tape<T>, ex: &Example) -> Result<Var> {
    if ex.task.is_generation() {
        mtp_loss(model, tape, &ex.layout)
    } else {
        ar_loss(model, tape, &ex.layout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_by_task: BTreeMap<String, f64>,
    pub grad_norm: f64,
}

/// Mean loss per task and its gradient, unit task weights, without updating.
pub fn batch_gradients<T: Real>(model: &Model<T>, batch: &[Example]) -> Result<(Gradients<T>, StepMetrics)> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let mut counts: BTreeMap<Task, usize> = BTreeMap::new();
    for ex in batch {
        *counts.entry(ex.task).or_default() += 1;
    }
    let mut grads = Gradients::zeros_like(&model.params);
    let mut by_task: BTreeMap<Task, f64> = BTreeMap::new();
    for ex in batch {
        let mut tape = Tape::new();
        let loss = example_loss(model, &mut tape, ex)?;
        let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite { task: ex.task.name().to_string() });
        }
        let w = 1.0 / counts[&ex.task] as f64;
        *by_task.entry(ex.task).or_default() += w * value;
        tape.backward_seeded(loss, T::c(w))?.accumulate(&mut grads, T::one());
    }
    let loss_total = by_task.values().sum();
    let loss_by_task = by_task.into_iter().map(|(t, v)| (t.name().to_string(), v)).collect();
    Ok((grads, StepMetrics { loss_total, loss_by_task, grad_norm: 0.0 }))
}

/// Gradient of the summed task losses, clipped, then one AdamW step at `lr`.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    batch: &[Example],
    lr: f64,
    clip: f64,
) -> Result<StepMetrics> {
    let (mut grads, mut metrics) = batch_gradients(model, batch)?;
    metrics.grad_norm = clip_grad_norm(&mut grads, clip);
    AdamW::step_with_lr(&mut model.params, &grads, optim, lr)?;
    Ok(metrics)
}
