//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation applied to registered tensors; a single
//! [`Tape::backward`] replay then yields gradients with respect to every leaf.
//! Everything runs in `f64`, shapes go up to rank 2, and the only implicit
//! broadcast is row-wise bias addition. The op set is deliberately small: it
//! covers exactly what the training objectives in this crate need.

mod tape;
mod tensor;

pub use tape::{finite_diff_check, Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction, forward evaluation, or backward.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expects {expected} input(s), got {got}")]
    WrongArity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a rank-{rank} input, got shape {shape:?}")]
    WrongRank {
        op: &'static str,
        rank: usize,
        shape: Vec<usize>,
    },
    #[error("log: input {value} is not strictly positive")]
    LogDomain { value: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("row index {index} out of bounds for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("backward: loss node has shape {shape:?}, expected a scalar")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node id {id} does not exist on this tape (length {len})")]
    UnknownNode { id: usize, len: usize },
    #[error("finite-difference check: non-finite value near parameter {param}, coordinate {coord}")]
    FiniteDiffNonFinite { param: usize, coord: usize },
}
