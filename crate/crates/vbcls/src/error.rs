//! Crate-wide error type. Every fallible operation returns [`Result`].

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid label {label}: expected a class index below {classes}")]
    InvalidLabel { label: usize, classes: usize },

    #[error("tape already consumed by a previous backward pass")]
    StaleTape,

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("optimizer state mismatch: {0}")]
    OptimizerState(String),

    #[error("unknown domain {domain}: model has {branches} decoder branches")]
    UnknownDomain { domain: usize, branches: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate alignment: reweighted prediction sums to zero")]
    DegenerateAlignment,

    #[error("{path}: line {line}: {message}")]
    CsvFormat {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
