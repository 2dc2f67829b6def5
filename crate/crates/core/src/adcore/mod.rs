//! Minimal reverse-mode differentiation over dense `f64` matrices, with the
//! segment operations needed for neighborhood attention.

mod gradcheck;
mod segment;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use segment::SegmentIndex;
pub use tape::{segment_softmax_values, Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("segment targets not grouped: edge {edge} breaks ordering")]
    UnsortedSegments { edge: usize },
    #[error("malformed segment offsets: {0}")]
    MalformedOffsets(String),
    #[error("node {node} is an edge target but its segment is empty")]
    EmptySegment { node: usize },
    #[error("edge {edge} targets {target} but lies in segment {segment}")]
    SegmentMismatch { edge: usize, target: usize, segment: usize },
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("leaky_relu slope must lie in (0, 1), got {0}")]
    InvalidSlope(f64),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
}
