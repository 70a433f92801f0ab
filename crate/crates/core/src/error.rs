use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the inpainting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or layer specs do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Input data violates a documented precondition (non-binary mask, odd dims, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// Random generation could not satisfy its target.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed image file.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: crate::train::CheckpointError,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
