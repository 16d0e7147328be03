//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted across the segmentation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor op was given incompatible shapes.
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    /// A configuration value is outside its valid range or inconsistent.
    Config(String),
    /// An API contract was violated by the caller (e.g. backward on a non-scalar).
    Contract(String),
    /// Batch statistics cannot be computed (single-element batch in train mode).
    DegenerateVariance { op: &'static str, elements: usize },
    /// A histogram collapsed to a single value.
    DegenerateHistogram(String),
    /// An image has no foreground pixels.
    NoForeground,
    /// Every pixel of a loss target was ignored.
    EmptyLoss,
    /// A training step produced a non-finite loss.
    NumericFailure { epoch: u32, batch_id: usize, detail: String },
    /// On-disk data failed to parse.
    Parse { path: String, offset: u64, detail: String },
    /// A training protocol precondition failed (e.g. no expert-labeled subjects).
    Protocol(String),
    /// Underlying I/O failure with the path involved.
    Io { path: String, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::DegenerateVariance { op, elements } => {
                write!(f, "{op}: cannot estimate variance from {elements} element(s)")
            }
            Error::DegenerateHistogram(msg) => write!(f, "degenerate histogram: {msg}"),
            Error::NoForeground => write!(f, "image has no foreground pixels"),
            Error::EmptyLoss => write!(f, "all pixels ignored: loss is undefined"),
            Error::NumericFailure { epoch, batch_id, detail } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch_id}: {detail}")
            }
            Error::Parse { path, offset, detail } => {
                write!(f, "parse error in {path} at byte {offset}: {detail}")
            }
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::Io { path, detail } => write!(f, "i/o error on {path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), detail: err.to_string() }
    }
}
