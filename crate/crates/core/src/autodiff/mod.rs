//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters are recorded as
//! leaves with [`Tape::param`], the forward computation is expressed with the
//! tape's primitive ops, and [`Tape::backward`] fills the leaf gradients.

mod check;
pub(crate) mod gemm;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_many};
pub use tape::{Tape, Unary, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid `{op}`: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests;
