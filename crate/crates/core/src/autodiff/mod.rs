//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Every forward pass records onto a fresh [`Tape`]; learnable tensors live
//! in a [`ParamStore`] and receive gradients through [`Tape::backward`].
//! Gradients accumulate until the caller zeroes them.

mod adam;
mod gradcheck;
mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamState, Moments};
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport};
pub use init::{kaiming_init, normal_init};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};

#[allow(unused_imports)]
pub(crate) use tape::{sigmoid, softplus};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
