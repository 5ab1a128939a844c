use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OctError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("surfaces are not ordered: surface {k} crosses surface {prev} at b={b}, a={a}")]
    Unordered { k: usize, prev: usize, b: usize, a: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
}

pub type Result<T, E = OctError> = std::result::Result<T, E>;

impl OctError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OctError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        OctError::Json { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        OctError::Format { path: path.into(), msg: msg.into() }
    }
}
