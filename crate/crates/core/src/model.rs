//! The unified transformer and the sequence layouts it consumes.
//!
//! One pre-norm backbone serves every task. A [`Layout`] is an ordered list
//! of segments (understanding features, text, condition image tokens,
//! masked generation tokens, generated text); segment-type and absolute
//! position embeddings are added to the content embeddings, and attention
//! lets each segment see itself and everything before it. Generated text is
//! causal, all other segments are bidirectional internally.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use unigrid_numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

use crate::codec::{Word, D_U, IMAGE_VOCAB, TEXT_VOCAB};
use crate::error::{contract, Error, Result};
use crate::world::CELLS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub image_vocab: usize,
    pub text_vocab: usize,
    pub d_u: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_seq_len: 224,
            image_vocab: IMAGE_VOCAB,
            text_vocab: TEXT_VOCAB,
            d_u: D_U,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        if self.image_vocab != IMAGE_VOCAB || self.text_vocab != TEXT_VOCAB || self.d_u != D_U {
            return bad(format!(
                "vocabularies are fixed by the codec: image {IMAGE_VOCAB}, text {TEXT_VOCAB}, d_u {D_U}"
            ));
        }
        // the longest assembly is an edit: three 64-token image segments plus an instruction
        if self.max_seq_len < 3 * CELLS + 8 {
            return bad(format!("max_seq_len {} cannot hold an edit layout", self.max_seq_len));
        }
        if self.dropout_rate != 0.0 {
            return bad("activation dropout is not supported; set dropout_rate to 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegKind {
    CondImageU,
    CondText,
    CondImageG,
    GenImage,
    GenText,
}

impl SegKind {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn causal(self) -> bool {
        self == SegKind::GenText
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Content {
    Ids(Vec<usize>),
    /// `[n, D_U]` frozen understanding features.
    Features(Arc<Tensor<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub kind: SegKind,
    pub content: Content,
    /// Per-position training targets (ignored where `loss_mask` is false).
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Segment {
    pub fn len(&self) -> usize {
        match &self.content {
            Content::Ids(ids) => ids.len(),
            Content::Features(f) => f.rows_cols().0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn condition(kind: SegKind, ids: &[usize]) -> Self {
        Segment { kind, content: Content::Ids(ids.to_vec()), targets: vec![0; ids.len()], loss_mask: vec![false; ids.len()] }
    }

    fn features(x_u: &Tensor<f64>) -> Self {
        let n = x_u.rows_cols().0;
        Segment {
            kind: SegKind::CondImageU,
            content: Content::Features(Arc::new(x_u.clone())),
            targets: vec![0; n],
            loss_mask: vec![false; n],
        }
    }

    /// Teacher-forced text: input `[BOS, a_0 .. a_{n-2}]`, targets `a`, loss everywhere.
    pub fn gen_text(answer: &[usize]) -> Self {
        let mut input = Vec::with_capacity(answer.len());
        if !answer.is_empty() {
            input.push(Word::Bos.id());
            input.extend_from_slice(&answer[..answer.len() - 1]);
        }
        Segment {
            kind: SegKind::GenText,
            content: Content::Ids(input),
            targets: answer.to_vec(),
            loss_mask: vec![true; answer.len()],
        }
    }

    /// Inference text segment `[BOS, prefix..]`; the last position predicts the next token.
    pub fn text_prompt(prefix: &[usize]) -> Self {
        let mut input = vec![Word::Bos.id()];
        input.extend_from_slice(prefix);
        let n = input.len();
        Segment { kind: SegKind::GenText, content: Content::Ids(input), targets: vec![0; n], loss_mask: vec![false; n] }
    }

    /// Masked image: `tokens` may contain MASK; loss on masked positions against `clean`.
    pub fn gen_image(tokens: &[usize], clean: Option<&[usize]>) -> Self {
        let mask: Vec<bool> = tokens.iter().map(|&t| t == crate::codec::MASK).collect();
        let (targets, loss_mask) = match clean {
            Some(c) => (c.to_vec(), mask),
            None => (vec![0; tokens.len()], vec![false; tokens.len()]),
        };
        Segment { kind: SegKind::GenImage, content: Content::Ids(tokens.to_vec()), targets, loss_mask }
    }
}

/// Condition order for the editing layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondOrder {
    /// X_U → T → X_G
    #[default]
    UTG,
    /// X_G → X_U → T
    GUT,
    /// X_U → X_G → T
    UGT,
}

impl CondOrder {
    fn kinds(self) -> [SegKind; 3] {
        use SegKind::*;
        match self {
            CondOrder::UTG => [CondImageU, CondText, CondImageG],
            CondOrder::GUT => [CondImageG, CondImageU, CondText],
            CondOrder::UGT => [CondImageU, CondImageG, CondText],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn checked(self, max_len: usize) -> Result<Self> {
        let len = self.len();
        if len > max_len {
            return Err(Error::Length { len, max: max_len });
        }
        if len == 0 {
            return contract("empty layout");
        }
        Ok(self)
    }

    /// Absolute start offset of every segment.
    pub fn offsets(&self) -> Vec<usize> {
        let mut o = Vec::with_capacity(self.segments.len());
        let mut at = 0;
        for s in &self.segments {
            o.push(at);
            at += s.len();
        }
        o
    }

    /// Absolute positions of the segments of one kind.
    pub fn positions_of(&self, kind: SegKind) -> Vec<usize> {
        self.offsets()
            .into_iter()
            .zip(&self.segments)
            .filter(|(_, s)| s.kind == kind)
            .flat_map(|(o, s)| o..o + s.len())
            .collect()
    }

    fn concat<F: Fn(&Segment) -> Vec<X>, X>(&self, kind: SegKind, f: F) -> Vec<X> {
        self.segments.iter().filter(|s| s.kind == kind).flat_map(f).collect()
    }

    pub fn targets_of(&self, kind: SegKind) -> Vec<usize> {
        self.concat(kind, |s| s.targets.clone())
    }

    pub fn loss_mask_of(&self, kind: SegKind) -> Vec<bool> {
        self.concat(kind, |s| s.loss_mask.clone())
    }

    pub fn loss_positions(&self) -> usize {
        self.segments.iter().map(|s| s.loss_mask.iter().filter(|&&m| m).count()).sum()
    }

    /// `mask[i*L + j]`: query `i` may attend to key `j`.
    pub fn attention_mask(&self) -> Vec<bool> {
        let len = self.len();
        let mut mask = vec![false; len * len];
        for (o, s) in self.offsets().into_iter().zip(&self.segments) {
            for i in o..o + s.len() {
                let end = if s.kind.causal() { i + 1 } else { o + s.len() };
                mask[i * len..i * len + end].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// `[x_u][question][answer]`; the answer is causal and carries the loss.
pub fn assemble_understanding(x_u: &Tensor<f64>, question: &[usize], answer: &[usize], max_len: usize) -> Result<Layout> {
    let mut segments = vec![Segment::features(x_u)];
    if !question.is_empty() {
        segments.push(Segment::condition(SegKind::CondText, question));
    }
    if !answer.is_empty() {
        segments.push(Segment::gen_text(answer));
    }
    Layout { segments }.checked(max_len)
}

/// `[prompt][image]`; an empty prompt is the unconditional branch.
pub fn assemble_t2i(prompt: &[usize], image: &[usize], clean: Option<&[usize]>, max_len: usize) -> Result<Layout> {
    if image.len() != CELLS {
        return contract(format!("image segment of length {}", image.len()));
    }
    let mut segments = Vec::new();
    if !prompt.is_empty() {
        segments.push(Segment::condition(SegKind::CondText, prompt));
    }
    segments.push(Segment::gen_image(image, clean));
    Layout { segments }.checked(max_len)
}

/// Editing conditions; `None` marks a dropped condition.
#[derive(Clone, Debug, Default)]
pub struct EditConditions<'a> {
    pub x_u: Option<&'a Tensor<f64>>,
    pub instruction: Option<&'a [usize]>,
    pub x_g: Option<&'a [usize]>,
}

/// Conditions in `order`, then the masked target segment.
pub fn assemble_edit(
    cond: &EditConditions<'_>,
    target: &[usize],
    clean: Option<&[usize]>,
    order: CondOrder,
    max_len: usize,
) -> Result<Layout> {
    if target.len() != CELLS || cond.x_g.is_some_and(|g| g.len() != CELLS) {
        return contract("edit image segments must have 64 tokens");
    }
    let mut segments = Vec::new();
    for kind in order.kinds() {
        let seg = match kind {
            SegKind::CondImageU => cond.x_u.map(Segment::features),
            SegKind::CondText => cond.instruction.filter(|t| !t.is_empty()).map(|t| Segment::condition(kind, t)),
            _ => cond.x_g.map(|g| Segment::condition(kind, g)),
        };
        segments.extend(seg);
    }
    segments.push(Segment::gen_image(target, clean));
    Layout { segments }.checked(max_len)
}

/// Text-only language modelling: one causal segment.
pub fn assemble_text(text: &[usize], max_len: usize) -> Result<Layout> {
    if text.is_empty() {
        return contract("empty text sequence");
    }
    Layout { segments: vec![Segment::gen_text(text)] }.checked(max_len)
}

struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct Ids {
    text_emb: ParamId,
    image_emb: ParamId,
    proj_u: Mlp,
    proj_g: Mlp,
    seg_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_image_w: ParamId,
    head_image_b: ParamId,
    head_text_w: ParamId,
    head_text_b: ParamId,
}

impl Ids {
    fn resolve<T: Real>(p: &ParamStore<T>, n_layers: usize) -> Result<Ids> {
        let get = |n: &str| p.id(n).ok_or_else(|| Error::Format(format!("missing parameter {n}")));
        let mlp = |pre: &str| -> Result<Mlp> {
            Ok(Mlp {
                w1: get(&format!("{pre}.w1"))?,
                b1: get(&format!("{pre}.b1"))?,
                w2: get(&format!("{pre}.w2"))?,
                b2: get(&format!("{pre}.b2"))?,
            })
        };
        let blocks = (0..n_layers)
            .map(|l| {
                let g = |n: &str| get(&format!("blocks.{l}.{n}"));
                Ok(BlockIds {
                    ln1_g: g("ln1.g")?,
                    ln1_b: g("ln1.b")?,
                    qkv: g("attn.qkv")?,
                    out_w: g("attn.out.w")?,
                    out_b: g("attn.out.b")?,
                    ln2_g: g("ln2.g")?,
                    ln2_b: g("ln2.b")?,
                    fc_w: g("mlp.fc.w")?,
                    fc_b: g("mlp.fc.b")?,
                    proj_w: g("mlp.proj.w")?,
                    proj_b: g("mlp.proj.b")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ids {
            text_emb: get("text_emb")?,
            image_emb: get("image_emb")?,
            proj_u: mlp("proj_u")?,
            proj_g: mlp("proj_g")?,
            seg_emb: get("seg_emb")?,
            pos_emb: get("pos_emb")?,
            blocks,
            lnf_g: get("ln_f.g")?,
            lnf_b: get("ln_f.b")?,
            head_image_w: get("head_image.w")?,
            head_image_b: get("head_image.b")?,
            head_text_w: get("head_text.w")?,
            head_text_b: get("head_text.b")?,
        })
    }
}

/// Every parameter name and shape, in storage order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("text_emb".into(), vec![c.text_vocab, d]),
        ("image_emb".into(), vec![c.image_vocab, d]),
        ("proj_u.w1".into(), vec![c.d_u, d]),
        ("proj_u.b1".into(), vec![d]),
        ("proj_u.w2".into(), vec![d, d]),
        ("proj_u.b2".into(), vec![d]),
        ("proj_g.w1".into(), vec![d, d]),
        ("proj_g.b1".into(), vec![d]),
        ("proj_g.w2".into(), vec![d, d]),
        ("proj_g.b2".into(), vec![d]),
        ("seg_emb".into(), vec![5, d]),
        ("pos_emb".into(), vec![c.max_seq_len, d]),
    ];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("blocks.{l}.{n}");
        v.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.qkv"), vec![d, 3 * d]),
            (p("attn.out.w"), vec![d, d]),
            (p("attn.out.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.fc.w"), vec![d, c.d_ff]),
            (p("mlp.fc.b"), vec![c.d_ff]),
            (p("mlp.proj.w"), vec![c.d_ff, d]),
            (p("mlp.proj.b"), vec![d]),
        ]);
    }
    v.extend([
        ("ln_f.g".into(), vec![d]),
        ("ln_f.b".into(), vec![d]),
        ("head_image.w".into(), vec![d, c.image_vocab]),
        ("head_image.b".into(), vec![c.image_vocab]),
        ("head_text.w".into(), vec![d, c.text_vocab]),
        ("head_text.b".into(), vec![c.text_vocab]),
    ]);
    v
}

const STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Truncated normal (±2σ) weights, zero biases, unit LayerNorm gains;
/// residual output projections scaled by `1/sqrt(2·n_layers)`.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, STD).expect("valid normal");
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(config) {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let data: Vec<T> = if name.ends_with(".g") {
            vec![T::one(); n]
        } else if shape.len() == 1 {
            vec![T::zero(); n]
        } else {
            let scale = if name.ends_with("attn.out.w") || name.ends_with("mlp.proj.w") { residual_scale } else { 1.0 };
            (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * STD {
                        break T::c(x * scale);
                    }
                })
                .collect()
        };
        debug_assert!(!leaf.is_empty());
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Closed-form parameter count.
pub fn param_count(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let embeddings = (c.text_vocab + c.image_vocab + 5 + c.max_seq_len) * d;
    let proj_u = c.d_u * d + d + d * d + d;
    let proj_g = 2 * (d * d + d);
    let block = 4 * d + 3 * d * d + d * d + d + 2 * d * c.d_ff + c.d_ff + d;
    let heads = (d + 1) * (c.image_vocab + c.text_vocab) + 2 * d;
    embeddings + proj_u + proj_g + c.n_layers * block + heads
}

/// Inference-time logits of one forward pass.
#[derive(Clone, Debug)]
pub struct Logits<T> {
    /// `[64, image_vocab]` over the generation image segment, if any.
    pub image: Option<Tensor<T>>,
    /// `[n, text_vocab]` over every text position, with their absolute positions.
    pub text: Option<(Vec<usize>, Tensor<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Add absolute position embeddings (disabled only for equivariance checks).
    pub positions: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { positions: true }
    }
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model::from_params(self.config.clone(), self.params.clone()).expect("resolved once already")
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::Format(format!("{} tensors, expected {}", params.len(), expected.len())));
        }
        for (id, (name, shape)) in params.ids().zip(&expected) {
            if params.name(id) != name || params.get(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor {} does not match {name} {shape:?}", params.name(id))));
            }
        }
        let ids = Ids::resolve(&params, config.n_layers)?;
        Ok(Model { config, params, ids })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn mlp(&self, tape: &mut Tape<T>, x: Var, m: &Mlp) -> Result<Var> {
        let p = &self.params;
        let (w1, b1, w2, b2) = (tape.param(p, m.w1), tape.param(p, m.b1), tape.param(p, m.w2), tape.param(p, m.b2));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.gelu(h);
        Ok(tape.linear(h, w2, Some(b2))?)
    }

    fn embed(&self, tape: &mut Tape<T>, layout: &Layout, opts: ForwardOptions) -> Result<Var> {
        let p = &self.params;
        let mut parts = Vec::with_capacity(layout.segments.len());
        for seg in layout.segments.iter().filter(|s| !s.is_empty()) {
            let e = match (&seg.content, seg.kind) {
                (Content::Features(f), SegKind::CondImageU) => {
                    let x = tape.leaf(f.cast(), false);
                    self.mlp(tape, x, &self.ids.proj_u)?
                }
                (Content::Ids(ids), SegKind::CondText | SegKind::GenText) => {
                    let table = tape.param(p, self.ids.text_emb);
                    tape.gather(table, ids)?
                }
                (Content::Ids(ids), SegKind::CondImageG) => {
                    let table = tape.param(p, self.ids.image_emb);
                    let e = tape.gather(table, ids)?;
                    self.mlp(tape, e, &self.ids.proj_g)?
                }
                (Content::Ids(ids), SegKind::GenImage) => {
                    let table = tape.param(p, self.ids.image_emb);
                    tape.gather(table, ids)?
                }
                (_, kind) => return contract(format!("segment {kind:?} has the wrong content type")),
            };
            parts.push(e);
        }
        let x = tape.concat_rows(&parts)?;
        let kinds: Vec<usize> =
            layout.segments.iter().flat_map(|s| std::iter::repeat(s.kind.index()).take(s.len())).collect();
        let seg_table = tape.param(p, self.ids.seg_emb);
        let seg = tape.gather(seg_table, &kinds)?;
        let mut x = tape.add(x, seg)?;
        if opts.positions {
            let pos_table = tape.param(p, self.ids.pos_emb);
            let positions: Vec<usize> = (0..layout.len()).collect();
            let pos = tape.gather(pos_table, &positions)?;
            x = tape.add(x, pos)?;
        }
        Ok(x)
    }

    /// Final hidden states `[L, d]` after the last LayerNorm.
    pub fn trunk(&self, tape: &mut Tape<T>, layout: &Layout, opts: ForwardOptions) -> Result<Var> {
        let len = layout.len();
        if len > self.config.max_seq_len {
            return Err(Error::Length { len, max: self.config.max_seq_len });
        }
        let p = &self.params;
        let mask = Arc::new(layout.attention_mask());
        let eps = T::c(LN_EPS);
        let mut x = self.embed(tape, layout, opts)?;
        for b in &self.ids.blocks {
            let (g, bb) = (tape.param(p, b.ln1_g), tape.param(p, b.ln1_b));
            let h = tape.layer_norm(x, g, bb, eps)?;
            let w = tape.param(p, b.qkv);
            let qkv = tape.linear(h, w, None)?;
            let a = tape.attention(qkv, mask.clone(), self.config.n_heads)?;
            let (ow, ob) = (tape.param(p, b.out_w), tape.param(p, b.out_b));
            let a = tape.linear(a, ow, Some(ob))?;
            x = tape.add(x, a)?;
            let (g, bb) = (tape.param(p, b.ln2_g), tape.param(p, b.ln2_b));
            let h = tape.layer_norm(x, g, bb, eps)?;
            let (fw, fb) = (tape.param(p, b.fc_w), tape.param(p, b.fc_b));
            let h = tape.linear(h, fw, Some(fb))?;
            let h = tape.gelu(h);
            let (pw, pb) = (tape.param(p, b.proj_w), tape.param(p, b.proj_b));
            let h = tape.linear(h, pw, Some(pb))?;
            x = tape.add(x, h)?;
        }
        let (g, bb) = (tape.param(p, self.ids.lnf_g), tape.param(p, self.ids.lnf_b));
        let out = tape.layer_norm(x, g, bb, eps)?;
        if !tape.value(out).all_finite() {
            return Err(unigrid_numerics::NumericsError::Numeric("non-finite activations".into()).into());
        }
        Ok(out)
    }

    /// Image-head logits at the given absolute positions.
    pub fn image_head(&self, tape: &mut Tape<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.select_rows(hidden, rows)?;
        let (w, b) = (tape.param(&self.params, self.ids.head_image_w), tape.param(&self.params, self.ids.head_image_b));
        Ok(tape.linear(h, w, Some(b))?)
    }

    /// Text-head logits at the given absolute positions.
    pub fn text_head(&self, tape: &mut Tape<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.select_rows(hidden, rows)?;
        let (w, b) = (tape.param(&self.params, self.ids.head_text_w), tape.param(&self.params, self.ids.head_text_b));
        Ok(tape.linear(h, w, Some(b))?)
    }

    pub fn forward(&self, layout: &Layout) -> Result<Logits<T>> {
        self.forward_with(layout, ForwardOptions::default())
    }

    pub fn forward_with(&self, layout: &Layout, opts: ForwardOptions) -> Result<Logits<T>> {
        let mut tape = Tape::new();
        let h = self.trunk(&mut tape, layout, opts)?;
        let image_rows = layout.positions_of(SegKind::GenImage);
        let image = if image_rows.is_empty() {
            None
        } else {
            let v = self.image_head(&mut tape, h, &image_rows)?;
            Some(tape.value(v).clone())
        };
        let mut text_rows = layout.positions_of(SegKind::CondText);
        text_rows.extend(layout.positions_of(SegKind::GenText));
        text_rows.sort_unstable();
        let text = if text_rows.is_empty() {
            None
        } else {
            let v = self.text_head(&mut tape, h, &text_rows)?;
            Some((text_rows, tape.value(v).clone()))
        };
        Ok(Logits { image, text })
    }

    /// Image logits only (the decoding hot path).
    pub fn image_logits(&self, layout: &Layout) -> Result<Tensor<T>> {
        let rows = layout.positions_of(SegKind::GenImage);
        if rows.is_empty() {
            return contract("layout has no generation image segment");
        }
        let mut tape = Tape::new();
        let h = self.trunk(&mut tape, layout, ForwardOptions::default())?;
        let v = self.image_head(&mut tape, h, &rows)?;
        Ok(tape.value(v).clone())
    }

    /// Text logits at the last position (next-token prediction for inference).
    pub fn next_token_logits(&self, layout: &Layout) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let h = self.trunk(&mut tape, layout, ForwardOptions::default())?;
        let v = self.text_head(&mut tape, h, &[layout.len() - 1])?;
        Ok(tape.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_g, encode_u, MASK};
    use crate::world::{sample_scene, Background, Scene};

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, ..ModelConfig::default() }
    }

    fn xu() -> Tensor<f64> {
        encode_u(&Scene::empty(Background::Black))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { max_seq_len: 192, ..ModelConfig::default() }.validate().is_err());
        let json = r#"{"d_model": 64, "bogus": 1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn understanding_layout() {
        let q = [Word::How.id(), Word::Many.id()];
        let a = [Word::Two.id(), Word::Eos.id()];
        let l = assemble_understanding(&xu(), &q, &a, 224).unwrap();
        assert_eq!(l.len(), 64 + 2 + 2);
        let mut mask = Vec::new();
        for s in &l.segments {
            mask.extend(s.loss_mask.iter().copied());
        }
        assert_eq!(mask, [vec![false; 66], vec![true; 2]].concat());
        let empty = assemble_understanding(&xu(), &q, &[], 224).unwrap();
        assert_eq!(empty.loss_positions(), 0);
        assert!(matches!(assemble_understanding(&xu(), &[0; 200], &a, 224), Err(Error::Length { .. })));
    }

    #[test]
    fn t2i_layout() {
        let all_mask = [MASK; 64];
        let clean = [12; 64];
        let l = assemble_t2i(&[Word::Red.id()], &all_mask, Some(&clean), 224).unwrap();
        assert_eq!(l.loss_positions(), 64);
        let l = assemble_t2i(&[Word::Red.id()], &clean, Some(&clean), 224).unwrap();
        assert_eq!(l.loss_positions(), 0);
        let u = assemble_t2i(&[], &all_mask, None, 224).unwrap();
        assert_eq!(u.segments.len(), 1);
        assert_eq!(u.segments[0].kind, SegKind::GenImage);
    }

    #[test]
    fn edit_layout_order() {
        let x = xu();
        let g = [12usize; 64];
        let t = [Word::Remove.id()];
        let full = EditConditions { x_u: Some(&x), instruction: Some(&t), x_g: Some(&g) };
        let l = assemble_edit(&full, &[MASK; 64], None, CondOrder::UTG, 224).unwrap();
        let kinds: Vec<SegKind> = l.segments.iter().map(|s| s.kind).collect();
        use SegKind::*;
        assert_eq!(kinds, vec![CondImageU, CondText, CondImageG, GenImage]);
        let l = assemble_edit(&EditConditions::default(), &[MASK; 64], None, CondOrder::UTG, 224).unwrap();
        assert_eq!(l.segments.len(), 1);
        let no_t = EditConditions { instruction: None, ..full.clone() };
        let l = assemble_edit(&no_t, &[MASK; 64], None, CondOrder::UTG, 224).unwrap();
        let kinds: Vec<SegKind> = l.segments.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![CondImageU, CondImageG, GenImage]);
        let l = assemble_edit(&full, &[MASK; 64], None, CondOrder::GUT, 224).unwrap();
        assert_eq!(l.segments[0].kind, CondImageG);
    }

    #[test]
    fn attention_mask_rules() {
        let q = [Word::How.id()];
        let a = [Word::Two.id(), Word::Eos.id(), Word::Eos.id()];
        let l = assemble_understanding(&xu(), &q, &a, 224).unwrap();
        let m = l.attention_mask();
        let len = l.len();
        // conditions do not see later segments
        assert!(!m[5 * len + 64]);
        assert!(m[5 * len + 63]);
        // answer occupies 65..68 and is causal
        assert!(m[66 * len + 65] && m[66 * len + 66] && !m[66 * len + 67]);
        assert!(m[67 * len + 65] && m[67 * len + 64]);
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let c = ModelConfig::default();
        let a = init_params::<f32>(&c, 7).unwrap();
        let b = init_params::<f32>(&c, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        // hand count for the defaults: d=128, ff=512, 4 layers, 224 positions
        let embeddings = (48 + 15 + 5 + 224) * 128;
        let projectors = (20 * 128 + 128 + 128 * 128 + 128) + 2 * (128 * 128 + 128);
        let block = 4 * 128 + 3 * 128 * 128 + 128 * 128 + 128 + 128 * 512 + 512 + 512 * 128 + 128;
        let heads = 2 * 128 + 128 * 15 + 15 + 128 * 48 + 48;
        let hand = embeddings + projectors + 4 * block + heads;
        assert_eq!(hand, 889_535);
        assert_eq!(a.numel(), hand);
        assert_eq!(param_count(&c), hand);
        let max = a.iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.abs())).fold(0.0f32, f32::max);
        assert!(max <= 1.0 + 1e-6, "gains are 1, weights within 2 sigma");
    }

    #[test]
    fn initial_image_logits_are_near_uniform() {
        let m = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
        let l = assemble_t2i(&[Word::Red.id(), Word::Circle.id()], &[MASK; 64], None, 224).unwrap();
        let logits = m.image_logits(&l).unwrap();
        assert_eq!(logits.shape(), &[64, IMAGE_VOCAB]);
        let clean = vec![3usize; 64];
        let ce = unigrid_numerics::cross_entropy_masked(&logits, &clean, &[true; 64]).unwrap();
        assert!((ce - (15f32).ln()).abs() < 0.3, "{ce}");
    }

    #[test]
    fn causal_positions_ignore_the_future() {
        let m = Model::<f64>::new(tiny(), 1).unwrap();
        let q = [Word::How.id(), Word::Many.id()];
        let a1 = [Word::Two.id(), Word::Three.id(), Word::Eos.id()];
        let a2 = [Word::Two.id(), Word::Seven.id(), Word::No.id()];
        let l1 = assemble_understanding(&xu(), &q, &a1, 224).unwrap();
        let l2 = assemble_understanding(&xu(), &q, &a2, 224).unwrap();
        let (r1, t1) = m.forward(&l1).unwrap().text.unwrap();
        let (r2, t2) = m.forward(&l2).unwrap().text.unwrap();
        assert_eq!(r1, r2);
        let w = TEXT_VOCAB;
        // inputs are [BOS, a0, a1]; rows up to the first differing input (index 2 of the answer) match bitwise
        let first_answer_row = r1.iter().position(|&p| p == 66).unwrap();
        for row in 0..=first_answer_row + 1 {
            assert_eq!(t1.data()[row * w..(row + 1) * w], t2.data()[row * w..(row + 1) * w]);
        }
        let last = first_answer_row + 2;
        assert_ne!(t1.data()[last * w..(last + 1) * w], t2.data()[last * w..(last + 1) * w]);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let m = Model::<f64>::new(tiny(), 2).unwrap();
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(4);
        let s = sample_scene(&mut rng, 3, 6);
        let mut tokens = encode_g(&s);
        for t in tokens.iter_mut().step_by(3) {
            *t = MASK;
        }
        let perm: Vec<usize> = (0..64).map(|i| (i * 7 + 3) % 64).collect();
        let permuted: Vec<usize> = perm.iter().map(|&i| tokens[i]).collect();
        let prompt = [Word::Red.id(), Word::Circle.id()];
        let opts = ForwardOptions { positions: false };
        let a = m.forward_with(&assemble_t2i(&prompt, &tokens, None, 224).unwrap(), opts).unwrap().image.unwrap();
        let b = m.forward_with(&assemble_t2i(&prompt, &permuted, None, 224).unwrap(), opts).unwrap().image.unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for k in 0..IMAGE_VOCAB {
                assert!((a.data()[i * IMAGE_VOCAB + k] - b.data()[j * IMAGE_VOCAB + k]).abs() < 1e-10);
            }
        }
        // with positions the same permutation is no longer a pure relabelling
        let a = m.forward(&assemble_t2i(&prompt, &tokens, None, 224).unwrap()).unwrap().image.unwrap();
        let b = m.forward(&assemble_t2i(&prompt, &permuted, None, 224).unwrap()).unwrap().image.unwrap();
        let differs = perm.iter().enumerate().any(|(j, &i)| {
            (0..IMAGE_VOCAB).any(|k| (a.data()[i * IMAGE_VOCAB + k] - b.data()[j * IMAGE_VOCAB + k]).abs() > 1e-10)
        });
        assert!(differs);
    }

    #[test]
    fn conditions_are_consumed() {
        let m = Model::<f64>::new(tiny(), 5).unwrap();
        let x = xu();
        let g = [12usize; 64];
        let t = [Word::SetBackground.id(), Word::White.id()];
        let full = EditConditions { x_u: Some(&x), instruction: Some(&t), x_g: Some(&g) };
        let base = m.image_logits(&assemble_edit(&full, &[MASK; 64], None, CondOrder::UTG, 224).unwrap()).unwrap();
        for dropped in [
            EditConditions { x_u: None, ..full.clone() },
            EditConditions { instruction: None, ..full.clone() },
            EditConditions { x_g: None, ..full.clone() },
        ] {
            let l = m.image_logits(&assemble_edit(&dropped, &[MASK; 64], None, CondOrder::UTG, 224).unwrap()).unwrap();
            assert_ne!(l, base);
        }
        assert_eq!(m.forward(&assemble_edit(&full, &[MASK; 64], None, CondOrder::UTG, 224).unwrap()).unwrap().image.unwrap(), base);
    }
}
