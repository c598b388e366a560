//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum GumeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl GumeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GumeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 ok, 1 usage, 2 validation, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            GumeError::Divergence(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GumeError>;
