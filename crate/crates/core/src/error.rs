use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the IVFG library.
#[derive(Debug, Error)]
pub enum IvfgError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("zero-norm feature vector in {0}")]
    ZeroVector(&'static str),

    #[error("batch size mismatch: {0} vs {1}")]
    BatchMismatch(usize, usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("backends did not converge: {0}")]
    NonConvergence(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("backend bundle is not frozen")]
    NotFrozen,

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = IvfgError> = std::result::Result<T, E>;

impl IvfgError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IvfgError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        IvfgError::CorruptCheckpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(IvfgError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
