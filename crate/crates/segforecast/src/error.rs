//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad schedule name, impossible channel counts,
    /// malformed palette, unusable hyperparameters.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level problem: missing frames, unreadable annotation,
    /// layout mismatch.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch detected before compute.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite loss or gradient, undefined metric, NaN input.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Image(_) => 3,
            Error::Numeric(_) => 4,
            Error::Json(_) => 2,
        }
    }
}
