//! Wengert-list reverse-mode autodiff.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever it needs for the backward pass. `backward` walks the list in
//! reverse once; no higher-order gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::{gelu, log_softmax_row, row_stats, Tensor};
use crate::tensor::gelu_grad;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<T> },
    LogProbGather { logits: Var, picks: Vec<(usize, usize)>, classes: usize, probs: Vec<T> },
    KlToConst { logits: Var, ref_logp: Vec<T>, classes: usize, probs: Vec<T>, per_row: Vec<T> },
    DotConst { x: Var, w: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape. One per training step (or per example); dropped after `backward`.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NumericsError::Shape(msg))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient) or a free variable (`requires_grad`).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[L,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inner) = self.value(x).rows_cols();
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != inner {
            return shape_err(format!("linear: input width {inner}, weight {ws:?}"));
        }
        let out_dim = ws[1];
        let mut out = Tensor::zeros(&[rows, out_dim]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out_dim {
                return shape_err(format!("linear: bias {} vs out {out_dim}", bv.len()));
            }
            for r in 0..rows {
                out.data_mut()[r * out_dim..(r + 1) * out_dim].copy_from_slice(bv.data());
            }
        }
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), rows, inner),
            MatRef::new(self.value(w).data(), inner, out_dim),
            T::one(),
            MatMut::new(out.data_mut(), rows, out_dim),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x += y;
        }
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Rows `ids` of a `[V,d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).rows_cols();
        if ids.is_empty() {
            return shape_err("gather: empty id list".into());
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::Contract(format!("gather id {id} outside table of {vocab} rows")));
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => self.value(p).rows_cols().1,
            None => return shape_err("concat_rows: no parts".into()),
        };
        let mut data = Vec::new();
        for &p in parts {
            let (_, c) = self.value(p).rows_cols();
            if c != d {
                return shape_err(format!("concat_rows: width {c} vs {d}"));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / d;
        let value = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols();
        if rows.is_empty() {
            return shape_err("select_rows: empty selection".into());
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return shape_err(format!("select_rows: row {r} of {n}"));
            }
            data.extend_from_slice(&self.value(x).data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return shape_err(format!("layer_norm: gain/bias vs width {cols}"));
        }
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(&[rows, cols]);
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let (mean, rs) = row_stats(row, eps);
                rstd[r] = rs;
                for c in 0..cols {
                    let h = (row[c] - mean) * rs;
                    xhat[r * cols + c] = h;
                    od[r * cols + c] = h * g[c] + b[c];
                }
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Multi-head scaled dot-product attention over a fused `[L, 3d]` q|k|v
    /// input. `mask[i*L + j]` allows query `i` to see key `j`; every row must
    /// allow at least one key.
    pub fn attention(&mut self, qkv: Var, mask: Arc<Vec<bool>>, heads: usize) -> Result<Var> {
        let (len, w3) = self.value(qkv).rows_cols();
        if w3 % 3 != 0 || (w3 / 3) % heads != 0 {
            return shape_err(format!("attention: width {w3} with {heads} heads"));
        }
        if mask.len() != len * len {
            return shape_err(format!("attention: mask {} for length {len}", mask.len()));
        }
        if (0..len).any(|i| !mask[i * len..(i + 1) * len].iter().any(|&m| m)) {
            return Err(NumericsError::Contract("attention: fully masked query row".into()));
        }
        let d = w3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * len * len];
        let mut out = Tensor::zeros(&[len, d]);
        let src = self.value(qkv).data();
        for h in 0..heads {
            let p = &mut probs[h * len * len..(h + 1) * len * len];
            let q = MatRef::block(src, len, w3, h * dh, dh);
            let k = MatRef::block(src, len, w3, d + h * dh, dh);
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, len, len));
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                let m = &mask[i * len..(i + 1) * len];
                let mut max = T::neg_infinity();
                for j in 0..len {
                    if m[j] && row[j] > max {
                        max = row[j];
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    row[j] = if m[j] { (row[j] - max).exp() } else { T::zero() };
                    sum += row[j];
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            let v = MatRef::block(src, len, w3, 2 * d + h * dh, dh);
            gemm(
                T::one(),
                MatRef::new(p, len, len),
                v,
                T::zero(),
                MatMut::block(out.data_mut(), len, d, h * dh, dh),
            );
        }
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).shape().len() - 1;
        let value = crate::tensor::softmax(self.value(x), axis)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Mean NLL over rows with `mask` set; scalar output.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).rows_cols();
        if targets.len() != rows || mask.len() != rows {
            return shape_err(format!("cross_entropy: {rows} rows vs {} targets", targets.len()));
        }
        let picks: Vec<(usize, usize)> =
            (0..rows).filter(|&r| mask[r]).map(|r| (r, targets[r])).collect();
        if picks.is_empty() {
            return Err(NumericsError::EmptyLoss);
        }
        let mut probs = Vec::with_capacity(picks.len() * vocab);
        let mut total = T::zero();
        for &(r, t) in &picks {
            if t >= vocab {
                return Err(NumericsError::Contract(format!("target {t} outside vocab {vocab}")));
            }
            let lp = log_softmax_row(&self.value(logits).data()[r * vocab..(r + 1) * vocab], vocab);
            total -= lp[t];
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(total / T::c(picks.len() as f64));
        Ok(self.push(value, Op::CrossEntropy { logits, picks, probs }, &[logits]))
    }

    /// `out[j] = log softmax(logits[row_j, ..classes])[token_j]`.
    pub fn log_prob_gather(&mut self, logits: Var, picks: &[(usize, usize)], classes: usize) -> Result<Var> {
        let (rows, vocab) = self.value(logits).rows_cols();
        if classes == 0 || classes > vocab || picks.is_empty() {
            return shape_err(format!("log_prob_gather: {classes} classes of {vocab}, {} picks", picks.len()));
        }
        let mut probs = Vec::with_capacity(picks.len() * classes);
        let mut out = Vec::with_capacity(picks.len());
        for &(r, t) in picks {
            if r >= rows || t >= classes {
                return Err(NumericsError::Contract(format!("log_prob_gather pick ({r},{t})")));
            }
            let lp = log_softmax_row(&self.value(logits).data()[r * vocab..(r + 1) * vocab], classes);
            out.push(lp[t]);
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let value = Tensor::new(vec![picks.len()], out)?;
        let op = Op::LogProbGather { logits, picks: picks.to_vec(), classes, probs };
        Ok(self.push(value, op, &[logits]))
    }

    /// Mean over rows of KL(softmax(logits) || exp(ref_logp)), both over the
    /// first `classes` columns. `ref_logp` is `[rows, classes]` log-probabilities.
    pub fn kl_to_const(&mut self, logits: Var, ref_logp: Vec<T>, classes: usize) -> Result<Var> {
        let (rows, vocab) = self.value(logits).rows_cols();
        if classes == 0 || classes > vocab || ref_logp.len() != rows * classes {
            return shape_err(format!("kl_to_const: {rows}x{vocab} logits, {} reference entries", ref_logp.len()));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut per_row = Vec::with_capacity(rows);
        for r in 0..rows {
            let lp = log_softmax_row(&self.value(logits).data()[r * vocab..(r + 1) * vocab], classes);
            let q = &ref_logp[r * classes..(r + 1) * classes];
            let kl = lp.iter().zip(q).map(|(&a, &b)| a.exp() * (a - b)).sum::<T>();
            per_row.push(kl);
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let mean = per_row.iter().copied().sum::<T>() / T::c(rows as f64);
        if !mean.is_finite() {
            return Err(NumericsError::Numeric("non-finite KL".into()));
        }
        let op = Op::KlToConst { logits, ref_logp, classes, probs, per_row };
        Ok(self.push(Tensor::scalar(mean), op, &[logits]))
    }

    /// `Σ x_i w_i` with constant weights; scalar output.
    pub fn dot_const(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return shape_err(format!("dot_const: {} vs {}", self.value(x).len(), w.len()));
        }
        let s = self.value(x).data().iter().zip(&w).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, w }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<TapeGrads<T>> {
        self.backward_seeded(loss, T::one())
    }

    /// Reverse pass with `d loss = seed`.
    pub fn backward_seeded(&self, loss: Var, seed: T) -> Result<TapeGrads<T>> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(TapeGrads { grads, params: self.params.clone() })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rows_cols();
                let n = self.value(*b).rows_cols().1;
                let gm = MatRef::new(g, m, n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    gemm(T::one(), gm, MatRef::new(bv, k, n).t(), T::one(), MatMut::new(da, m, k));
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(T::one(), MatRef::new(av, m, k).t(), gm, T::one(), MatMut::new(db, k, n));
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, inner) = self.value(*x).rows_cols();
                let out_dim = self.value(*w).shape()[1];
                let gm = MatRef::new(g, rows, out_dim);
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    gemm(T::one(), gm, MatRef::new(wv, inner, out_dim).t(), T::one(), MatMut::new(dx, rows, inner));
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(T::one(), MatRef::new(xv, rows, inner).t(), gm, T::one(), MatMut::new(dw, inner, out_dim));
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for r in 0..rows {
                            for (d, &v) in db.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y);
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).rows_cols().1;
                if let Some(dt) = self.acc(grads, *table) {
                    for (j, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[j * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(dp) = self.acc(grads, *p) {
                        dp.iter_mut().zip(&g[off..off + n]).for_each(|(x, &y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let d = self.value(*x).rows_cols().1;
                if let Some(dx) = self.acc(grads, *x) {
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dx[r * d + c] += g[j * d + c];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let gv = self.value(*gain).data();
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::c(cols as f64);
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            mean_d += dh;
                            mean_dx += dh * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            dx[r * cols + c] += rstd[r] * (dh - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Attention { qkv, heads, probs, .. } => {
                let (len, w3) = self.value(*qkv).rows_cols();
                let d = w3 / 3;
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let src = self.value(*qkv).data();
                let Some(dq) = self.acc(grads, *qkv) else { return };
                let mut dp = vec![T::zero(); len * len];
                for h in 0..*heads {
                    let p = &probs[h * len * len..(h + 1) * len * len];
                    let go = MatRef::block(g, len, d, h * dh, dh);
                    let v = MatRef::block(src, len, w3, 2 * d + h * dh, dh);
                    // dV = Pᵀ dO
                    gemm(T::one(), MatRef::new(p, len, len).t(), go, T::one(), MatMut::block(dq, len, w3, 2 * d + h * dh, dh));
                    // dP = dO Vᵀ
                    gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, len, len));
                    for i in 0..len {
                        let pr = &p[i * len..(i + 1) * len];
                        let dr = &mut dp[i * len..(i + 1) * len];
                        let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..len {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    let q = MatRef::block(src, len, w3, h * dh, dh);
                    let k = MatRef::block(src, len, w3, d + h * dh, dh);
                    let ds = MatRef::new(&dp, len, len);
                    gemm(scale, ds, k, T::one(), MatMut::block(dq, len, w3, h * dh, dh));
                    gemm(scale, ds.t(), q, T::one(), MatMut::block(dq, len, w3, d + h * dh, dh));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (rows, cols) = node.value.rows_cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..cols {
                            dx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, picks, probs } => {
                let vocab = self.value(*logits).rows_cols().1;
                let s = g[0] / T::c(picks.len() as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for (j, &(r, t)) in picks.iter().enumerate() {
                        for c in 0..vocab {
                            dl[r * vocab + c] += s * probs[j * vocab + c];
                        }
                        dl[r * vocab + t] -= s;
                    }
                }
            }
            Op::LogProbGather { logits, picks, classes, probs } => {
                let vocab = self.value(*logits).rows_cols().1;
                if let Some(dl) = self.acc(grads, *logits) {
                    for (j, &(r, t)) in picks.iter().enumerate() {
                        for c in 0..*classes {
                            dl[r * vocab + c] -= g[j] * probs[j * classes + c];
                        }
                        dl[r * vocab + t] += g[j];
                    }
                }
            }
            Op::KlToConst { logits, ref_logp, classes, probs, per_row } => {
                let (rows, vocab) = self.value(*logits).rows_cols();
                let s = g[0] / T::c(rows as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for r in 0..rows {
                        for c in 0..*classes {
                            let p = probs[r * classes + c];
                            let lr = p.ln() - ref_logp[r * classes + c];
                            dl[r * vocab + c] += s * p * (lr - per_row[r]);
                        }
                    }
                }
            }
            Op::DotConst { x, w } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(w).for_each(|(d, &wi)| *d += g[0] * wi);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

/// Result of a reverse pass.
pub struct TapeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> TapeGrads<T> {
    /// Gradient of a leaf or parameter node; `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Add `scale * grad` into the accumulator for every registered parameter.
    pub fn accumulate(&self, into: &mut Gradients<T>, scale: T) {
        for (&id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                for (a, &b) in into.get_mut(id).iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> Tensor<f64> {
        Tensor::scalar(x)
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(2.0), true);
        let y = tape.leaf(s(3.0), true);
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert_eq!(g.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(2.0), true);
        let xd = tape.detach(x);
        let y = tape.mul(xd, xd).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);
        assert!(g.get(xd).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let build = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.7, -1.1]).unwrap(), true);
            let b = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, -0.5, 0.25, 0.3, -0.9]).unwrap(), true);
            let c = tape.matmul(a, b).unwrap();
            let sm = tape.softmax(c).unwrap();
            let l = tape.dot_const(sm, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(a).unwrap().to_vec(), g.get(b).unwrap().to_vec())
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn fully_masked_attention_row_rejected() {
        let mut tape = Tape::<f64>::new();
        let qkv = tape.leaf(Tensor::zeros(&[2, 6]), true);
        let mask = Arc::new(vec![true, false, false, false]);
        assert!(tape.attention(qkv, mask, 1).is_err());
    }
}
