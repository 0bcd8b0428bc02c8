//! Dense matrices and a reverse-mode tape with exact gradients for every
//! primitive the hetero-GNN uses.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, grad_check_reference, GradCheckReport, ScalarFunction};
pub use matrix::Matrix;
pub use tape::{segment_softmax, Mode, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward target must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("segment softmax over an empty segment id space")]
    EmptySegments,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}
