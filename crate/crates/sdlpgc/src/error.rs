//! Crate-wide error type with CLI exit-code classification.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid data in {path}: {msg}")]
    DataFormat { path: PathBuf, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero variance: training slice is constant, cannot fit normalizer")]
    ZeroVariance,

    #[error(
        "partition of length {len} is too short for windowing: \
         needs at least {min} = input_len + horizon timesteps"
    )]
    WindowTooShort { len: usize, min: usize },

    #[error("adjacency row {row} sums to {sum:.6}, expected 1 within {tol}")]
    NotRowStochastic { row: usize, sum: f64, tol: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::DataFormat {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// CLI contract: 0 success, 1 validation error, 2 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DataFormat { .. }
            | Error::Config(_)
            | Error::Shape(_)
            | Error::ZeroVariance
            | Error::WindowTooShort { .. }
            | Error::NotRowStochastic { .. } => 1,
            Error::Io { .. } | Error::Checkpoint(_) | Error::Training(_) | Error::Plot(_) => 2,
        }
    }
}
