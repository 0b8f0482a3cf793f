//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes are incompatible for the named operation.
    #[error("dimension mismatch in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed on-disk data (WAV, checkpoint, config, CSV).
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Structurally valid file in an encoding we do not handle.
    #[error("unsupported format: {0}")]
    Unsupported(String),

    /// An operation produced NaN/Inf while finiteness checking was enabled.
    #[error("non-finite values produced by op '{op}'")]
    NonFinite { op: &'static str },

    /// WOLA normalization denominator collapsed (degenerate window/hop).
    #[error("window normalization below threshold at sample {index}")]
    Windowing { index: usize },

    /// Checkpoint cannot be loaded into the requested model.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dim { op, details: details.into() }
    }
}
