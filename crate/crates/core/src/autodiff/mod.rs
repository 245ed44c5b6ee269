//! Dense tensors, a reverse-mode tape, the AdamW optimizer and the
//! cosine warm-restart learning-rate schedule.

mod optim;
mod schedule;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use schedule::LrSchedule;
pub use tape::{Tape, Var, LAYER_NORM_EPS, NORMALIZE_EPS};
pub use tensor::{ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("ragged rows")]
    Ragged,
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("softmax over an empty segment")]
    EmptySegment,
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
}
