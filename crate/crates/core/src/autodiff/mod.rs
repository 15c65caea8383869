//! Minimal reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] owns every value produced during one forward computation.
//! Shapes are explicit and row-major; the only implicit broadcast is a
//! one-element array against any array in [`Tape::add`] and [`Tape::mul`].

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    DetachedTape,
    #[error("backward already ran on this tape; record a new tape")]
    AlreadyConsumed,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value at parameter {param}, coordinate {index}")]
    NonFinite { param: usize, index: usize },
    #[error("finite-difference epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

#[cfg(test)]
mod tests;
