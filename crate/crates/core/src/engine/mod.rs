//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass and is consumed by exactly one
//! backward pass. Models label the nodes that gradient-computation methods
//! need to address (ReLUs, residual branches, attention weights, block
//! outputs); a [`HookRegistry`] attached to the tape decides how those
//! labeled nodes behave in backward and which of them are captured.

mod gradcheck;
mod hooks;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, numeric_gradient};
pub use hooks::{BackwardMod, HookDescriptor, HookKind, HookRegistry};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("tape already consumed by a backward pass")]
    TapeReused,
    #[error("unknown layer label {0:?}")]
    UnknownLabel(String),
    #[error("invalid hook: {0}")]
    InvalidHook(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl EngineError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn invalid(op: &'static str, msg: String) -> Self {
        Self::InvalidArgument { op, msg }
    }
}
