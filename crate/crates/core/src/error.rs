use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("triplet id {id} out of range (store holds {len})")]
    OutOfRange { id: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad snapshot: {0}")]
    Snapshot(String),
    #[error("stale index: built for model {index:016x}, current model is {model:016x}")]
    StaleIndex { index: u64, model: u64 },
    #[error("query ids do not match: missing {missing:?}")]
    IdMismatch { missing: Vec<String> },
    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
