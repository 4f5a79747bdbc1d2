//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Every tensor is an immutable, reference-counted node. Operations on
//! tensors that require grad record a backward rule that points at their
//! inputs; [`Tensor::backward`] replays those rules in reverse creation order.

mod autograd;
mod gemm;
pub mod macs;
mod ops;
mod scalar;
mod shape;

pub use autograd::{no_grad, Tape, Tensor};
pub use scalar::Scalar;
pub use shape::{IntoShape, Shape};

pub(crate) use gemm::gemm;
