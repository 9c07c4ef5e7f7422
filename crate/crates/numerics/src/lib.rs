//! Minimal dense tensor kernels with a reverse-mode gradient tape and an
//! AdamW optimizer.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training) and
//! `f64` (finite-difference gradient checks). Matrix products are delegated
//! to `matrixmultiply`; every other kernel is a plain loop.

mod error;
mod gradcheck;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, sample_coords};
pub use optim::{clip_grad_norm, AdamHyper, AdamW, OptimState};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::{gemm, MatMut, MatRef, Real};
pub use tape::{Tape, TapeGrads, Var};
pub use tensor::{cross_entropy_masked, gelu, layer_norm, log_softmax_row, matmul, softmax, Tensor};
