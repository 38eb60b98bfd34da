use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PrtError {
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("training diverged in stage `{stage}`: {detail}")]
    Divergence { stage: String, detail: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed file {}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PrtError>;

impl PrtError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PrtError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PrtError::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PrtError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            PrtError::MissingFile(path)
        } else {
            PrtError::Io { path, source }
        }
    }
}
