use crate::error::{NumericsError, Result};
use crate::real::{gemm, MatMut, MatRef, Real};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn scalar(x: T) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Matrix product of `[m,k]` and `[k,n]` tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(NumericsError::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        T::one(),
        MatRef::new(&a.data, m, k),
        MatRef::new(&b.data, k, n),
        T::zero(),
        MatMut::new(&mut out.data, m, n),
    );
    Ok(out)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape.len() {
        return Err(NumericsError::Shape(format!("axis {axis} for shape {:?}", x.shape)));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out.data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out.data[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Log-softmax of one row restricted to its first `classes` entries.
pub fn log_softmax_row<T: Real>(row: &[T], classes: usize) -> Vec<T> {
    let row = &row[..classes];
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Row-wise layer normalisation over the last axis followed by `gain * x + bias`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (rows, cols) = x.rows_cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(NumericsError::Shape(format!(
            "layer_norm gain/bias {} / {} vs last dim {cols}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let (_, rstd) = row_stats(row, eps);
        let mean = row.iter().copied().sum::<T>() / T::c(cols as f64);
        for c in 0..cols {
            out.data[r * cols + c] = (row[c] - mean) * rstd * gain.data[c] + bias.data[c];
        }
    }
    Ok(out)
}

pub(crate) fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Mean negative log-likelihood over rows where `mask` is true.
pub fn cross_entropy_masked<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    let (rows, vocab) = logits.rows_cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(NumericsError::Shape(format!(
            "cross_entropy: {rows} rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let mut total = T::zero();
    let mut n = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        if targets[r] >= vocab {
            return Err(NumericsError::Contract(format!("target {} outside vocab {vocab}", targets[r])));
        }
        let lp = log_softmax_row(&logits.data[r * vocab..(r + 1) * vocab], vocab);
        total -= lp[targets[r]];
        n += 1;
    }
    if n == 0 {
        return Err(NumericsError::EmptyLoss);
    }
    Ok(total / T::c(n as f64))
}
