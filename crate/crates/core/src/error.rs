use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth value {0}")]
    InvalidDepth(f64),

    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no admissible frame pair: {0}")]
    EmptyScene(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },

    #[error("frame {frame}: {reason}")]
    Frame { frame: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
