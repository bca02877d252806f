//! Deterministic f64 building blocks with hand-written reverse passes:
//! embedding lookup, stacked LSTM, affine layer, cosine similarity, the
//! candidate softmax loss, Adam, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layers;
mod lstm;
mod ops;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error};
pub use layers::{Affine, Embedding};
pub use lstm::{LstmLayer, LstmStack, LstmTape};
pub use ops::{candidate_softmax_loss, cosine_similarity, cosine_with_grad, SoftmaxLoss};
pub use tensor::{Parameters, Tensor};
pub(crate) use tensor::{prefixed, prefixed_mut};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{layer}: expected input width {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("vectors of different length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("candidate softmax needs at least 2 candidates and beta > 0")]
    BadCandidates,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
