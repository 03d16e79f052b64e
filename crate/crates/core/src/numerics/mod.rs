//! Dense real tensors, a reverse-mode autodiff tape, complex-pair linear
//! algebra and the Adam optimizer.

mod adam;
mod complex;
mod lu;
mod tape;
mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use complex::{CVar, ComplexMat};
pub use lu::{LuFactors, PIVOT_TOLERANCE};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::RealTensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("expected a matrix, got shape {shape:?}")]
    NotAMatrix { shape: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("singular matrix: pivot {pivot} below tolerance")]
    SingularMatrix { pivot: usize },
    #[error("rank {rank} out of range for length {len}")]
    RankOutOfRange { rank: usize, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
