//! Error types shared by the tensor / graph layers.

use std::fmt;

use crate::tensor::Shape;

/// Tensor axis, for dimension-mismatch diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::Batch => "batch",
            Axis::Channel => "channel",
            Axis::Height => "height",
            Axis::Width => "width",
        };
        f.write_str(s)
    }
}

/// Error produced by tensor operations and graph construction.
#[derive(Clone, Debug, PartialEq)]
pub enum OpError {
    /// A dimension did not match what the operation requires.
    AxisMismatch { op: &'static str, axis: Axis, expected: usize, actual: usize },
    /// Two shapes cannot be combined (broadcast / elementwise).
    ShapeIncompatible { op: &'static str, lhs: Shape, rhs: Shape },
    /// Invalid operation configuration (group divisibility, empty output, ...).
    Config(String),
    /// Label or index data out of range.
    Data(String),
}

impl fmt::Display for OpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpError::AxisMismatch { op, axis, expected, actual } => {
                write!(f, "{op}: {axis} axis mismatch (expected {expected}, got {actual})")
            }
            OpError::ShapeIncompatible { op, lhs, rhs } => {
                write!(f, "{op}: shapes {lhs} and {rhs} are incompatible")
            }
            OpError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            OpError::Data(msg) => write!(f, "invalid data: {msg}"),
        }
    }
}

impl std::error::Error for OpError {}
