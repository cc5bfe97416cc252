//! Error type shared across the crate.

use std::fmt;

/// Errors produced by tensor ops, the model, the data pipeline, metrics and
/// the trainer. Every failure path returns one of these; nothing panics on
/// malformed user input.
#[derive(Debug)]
pub enum FafError {
    /// Tensor/array dimensions do not satisfy an op's contract.
    ShapeMismatch { op: &'static str, detail: String },
    /// An argument is out of the supported domain (bad kernel size, sigma <= 0, ...).
    InvalidArgument { op: &'static str, detail: String },
    /// A computation is undefined on this input (all-zero pixels, N < 2, ...).
    Degenerate { op: &'static str, detail: String },
    /// Backward was asked to seed from a non-scalar node.
    NonScalarLoss { numel: usize },
    /// A gradient check was handed a non-deterministic computation.
    NonDeterministic { detail: String },
    /// A container file failed to parse (bad magic, truncation, overflow).
    Format { path: String, detail: String },
    /// Training aborted (NaN gradient, divergence).
    Train { detail: String },
    Io(std::io::Error),
}

impl fmt::Display for FafError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FafError::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            FafError::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            FafError::Degenerate { op, detail } => write!(f, "{op}: degenerate input: {detail}"),
            FafError::NonScalarLoss { numel } => {
                write!(f, "backward: loss node must be scalar, has {numel} elements")
            }
            FafError::NonDeterministic { detail } => {
                write!(f, "gradient check: computation is not deterministic: {detail}")
            }
            FafError::Format { path, detail } => write!(f, "{path}: {detail}"),
            FafError::Train { detail } => write!(f, "training aborted: {detail}"),
            FafError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for FafError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FafError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for FafError {
    fn from(e: std::io::Error) -> Self {
        FafError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, FafError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> FafError {
    FafError::ShapeMismatch { op, detail: detail.into() }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> FafError {
    FafError::InvalidArgument { op, detail: detail.into() }
}

pub(crate) fn degenerate_err(op: &'static str, detail: impl Into<String>) -> FafError {
    FafError::Degenerate { op, detail: detail.into() }
}
