//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every trainable computation in the crate (the CDE encoder unrolled through
//! its solver steps, the decoder, the acuity correlation loss, the stiffness
//! penalty and the offline RL networks) is recorded on a [`Tape`] and
//! differentiated by a single reverse sweep.
//!
//! Subgradient conventions: `relu'(0) = 0` and `abs'(0) = 0`.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
pub use tape::{CustomOp, Elementwise, Tape, Var};

pub(crate) use tape::{centered_moments, softmax_rows};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("correlation undefined for a zero-variance series")]
    UndefinedCorrelation,
    #[error("tape contract violated: {0}")]
    Contract(String),
}
