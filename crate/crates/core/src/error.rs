//! Error taxonomy shared across the crate.
//!
//! Variants are grouped by failure category so that callers (notably the CLI)
//! can map them onto distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, mismatched shapes, unsupported parameter tuples.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion and file-format problems.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failures: non-finite values, division by zero, divergence.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint serialization problems (corrupt, truncated, mismatched).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Io(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
