use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator components.
#[derive(Debug, Error)]
pub enum SimError {
    /// Two parameter vectors (or a vector and a model spec) disagree on length.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// An aggregation was requested over an empty update buffer.
    #[error("empty update buffer")]
    EmptyBuffer,

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A dataset is empty or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// An input file does not follow its declared binary layout.
    #[error("format error: {0}")]
    Format(String),

    /// A state machine or ordering rule of the protocol was violated.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Every raw aggregation weight is zero, so normalization is impossible.
    #[error("degenerate aggregation weights: all raw weights are zero")]
    DegenerateWeights,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
