//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the pose toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A geometric precondition was violated (e.g. projecting a point with
    /// non-positive depth).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Invalid configuration values.
    #[error("config: {0}")]
    Config(String),

    /// Dataset layout or content problems.
    #[error("data: {0}")]
    Data(String),

    /// Checkpoint serialization, deserialization or compatibility problems.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A tensor shape did not match the expected contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json: {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Attach a path to an IO error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a path to a JSON error.
    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
