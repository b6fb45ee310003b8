//! Dense tensors, reverse-mode differentiation, parameters and optimization.

mod array;
pub mod checkpoint;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod real;

pub use array::Tensor;
pub use graph::{log_softmax_along, ConvSpec, ConvTransposeSpec, Gradients, Graph, Var};
pub use kernels::PadMode;
pub use nn::{same_conv, Bound, Conv2d, ConvTranspose2d, Linear, ParamId, ParamStore};
pub use optim::{AdamConfig, AdamState};
pub use real::Real;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("log of a non-positive value")]
    NonPositiveLog,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
}
