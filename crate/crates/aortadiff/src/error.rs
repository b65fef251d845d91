//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("refusing to overwrite non-empty output: {0}")]
    Overwrite(PathBuf),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing file: {0}")]
    Missing(PathBuf),
}

impl Error {
    /// Stable one-word category used by the CLI for machine-parsable
    /// error lines and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::Numeric(_) => "numeric",
            Error::Overwrite(_) => "overwrite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Missing(_) => "missing",
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Shape(_) => 3,
            Error::Io { .. } | Error::Missing(_) => 4,
            Error::Overwrite(_) => 5,
            Error::Numeric(_) | Error::Degenerate(_) => 6,
            Error::Checkpoint(_) => 7,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
