use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: u64, reason: String },

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error means on-disk data is damaged rather than the
    /// request being invalid.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedFormat(_) | Error::CorruptRecord { .. } | Error::Corruption(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
