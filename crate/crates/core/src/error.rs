use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Reasons a model or dataset file is rejected on load.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("graph validation failed: {0}")]
    Validation(String),
    #[error("label byte {0} is not a gesture class")]
    BadLabel(u8),
    #[error("split byte {0} is not 0 (train) or 1 (test)")]
    BadSplit(u8),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unknown code: {0}")]
    UnknownCode(String),
}

impl FormatError {
    /// Stable machine-readable code for each rejection reason.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::VersionMismatch { .. } => "version_mismatch",
            FormatError::Truncated(_) => "truncated",
            FormatError::Validation(_) => "validation",
            FormatError::BadLabel(_) => "bad_label",
            FormatError::BadSplit(_) => "bad_split",
            FormatError::LengthMismatch(_) => "length_mismatch",
            FormatError::UnknownCode(_) => "unknown_code",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid format: {0}")]
    Format(#[from] FormatError),
    #[error("quantization error: {0}")]
    Quant(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    #[error("missing forward cache: {0}")]
    MissingCache(String),
    #[error("network error: {0}")]
    Network(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
