//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received an empty input where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// An argument violated a precondition (non-positive resolution, bad bounds, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or table shapes do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value or combination is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary file does not follow the expected layout.
    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A numeric invariant was violated (non-finite loss or gradient, degenerate point).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn empty(what: impl Into<String>) -> Self {
        Error::EmptyInput(what.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
