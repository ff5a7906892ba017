use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MbvrError>;

#[derive(Debug, Error)]
pub enum MbvrError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Zero-norm vectors, undefined ratios and similar inputs with no meaningful value.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A malformed dataset, checkpoint or index file; `offset` is the byte position
    /// at which parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training diverged; `dump` names the file describing the offending batch.
    #[error("non-finite loss at epoch {epoch}, step {step} (batch dump: {dump})")]
    NonFiniteLoss { epoch: usize, step: usize, dump: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MbvrError {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            MbvrError::Shape(_) => "shape",
            MbvrError::Degenerate(_) => "degenerate",
            MbvrError::InvalidArgument(_) => "invalid_argument",
            MbvrError::Format { .. } => "format",
            MbvrError::NonFiniteLoss { .. } => "non_finite_loss",
            MbvrError::Config(_) => "config",
            MbvrError::Io(_) => "io",
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        MbvrError::Format {
            offset,
            message: message.into(),
        }
    }
}
