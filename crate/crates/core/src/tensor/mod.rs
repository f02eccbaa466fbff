//! Dense tensors and a reverse-mode tape.
//!
//! Values are plain [`Tensor`]s. Anything that needs a gradient is recorded on
//! a [`Tape`] and addressed through a [`Var`] handle; nodes are appended in
//! execution order, so the tape itself is the topologically sorted
//! computation record that [`Tape::backward`] replays in reverse.

mod dense;
pub(crate) mod gemm;
mod real;
mod tape;

pub use dense::Tensor;
pub use real::{DType, Real};
pub use tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
