//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps error
//! categories onto process exit codes (2 config, 3 data, 4 numerical).

use std::path::PathBuf;

use thiserror::Error;

/// Unified error for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration file, key, or value.
    #[error("config error: {0}")]
    Config(String),

    /// Bad or missing input data (datasets, manifests, artifacts).
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be decoded as an image.
    #[error("decode error: {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    /// Tensor or vector shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument outside shape concerns (bounds, ranges, labels).
    #[error("argument error: {0}")]
    Argument(String),

    /// Numerical failure (non-PD kernel matrix, divergence, NaN).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    /// Graph state misuse (e.g. backward before any forward pass).
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Decode { .. }
            | Error::Shape(_)
            | Error::Argument(_)
            | Error::Io { .. } => 3,
            Error::Numerical(_) | Error::Diverged { .. } | Error::State(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
