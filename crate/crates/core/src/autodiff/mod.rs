//! Minimal dense reverse-mode differentiation.
//!
//! A [`Tape`] records every forward op together with its output value. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates parameter gradients into a [`ParamStore`], which [`adam_step`]
//! then consumes.

mod gemm;
mod param;
pub mod rng;
mod tape;
mod tensor;

pub use param::{adam_step, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{huber_loss, Tape, Var};
pub use tensor::Tensor;

pub(crate) use gemm::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("gradient of parameter `{0}` is not finite")]
    NonFiniteGradient(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape has already been consumed by backward")]
    TapeConsumed,
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
}
