use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, sizes, or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input values (labels out of range, images outside [0,1], ...).
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Corrupt or incompatible file header.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint contents disagree with the architecture they claim.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A file ended early.
    #[error("truncated file at byte offset {offset}: expected {expected} more bytes, found {actual}")]
    Truncated {
        offset: u64,
        expected: u64,
        actual: u64,
    },

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
