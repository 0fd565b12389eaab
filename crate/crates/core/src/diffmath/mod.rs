//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a define-by-run graph of tensor operations. The
//! supported operation set is deliberately small: elementwise
//! `add`/`sub`/`mul`/`div` (broadcasting a `[cols]` row over a leading batch
//! dimension), `matmul`, last-dimension `concat`, `tanh`, `elu`,
//! `softplus`, `square`, `scale`, full `sum`/`mean`, plus two fused Gaussian
//! primitives used by the variational objectives.

mod check;
mod gaussian;
mod noise;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use check::{grad_check, grad_check_with, GradCheck};
pub use gaussian::{kl_diag, log_prob_diag, reparam_sample};
pub use noise::NoiseSource;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} has rank > 2")]
    Rank { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("{op}: result is not finite")]
    NonFinite { op: &'static str },
    #[error("{op}: {what} must be strictly positive")]
    Domain { op: &'static str, what: &'static str },
    #[error("usage: {0}")]
    Usage(&'static str),
}
