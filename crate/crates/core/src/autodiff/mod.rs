//! Tensor arithmetic with reverse-mode differentiation.

mod backward;
pub mod fft;
mod gradcheck;
mod ops;
mod tensor;

pub use backward::Gradients;
pub use fft::{fft_time, ifft_time, ComplexSeries};
pub use gradcheck::{grad_check, grad_check_with_step, relative_error, GradReport, FD_STEP};
pub use ops::{elementwise, huber_value, reduce, ElementwiseOp, ReduceOp};
pub use tensor::{Result, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{len} values cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("range {start}..{} exceeds extent {extent}", start + len)]
    Range { start: usize, len: usize, extent: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("{op}: argument outside the domain")]
    Domain { op: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("binary operation is missing its second operand")]
    MissingOperand,
    #[error("empty input")]
    Empty,
    #[error("{0}")]
    InvalidArgument(&'static str),
}

#[cfg(test)]
mod tests;
