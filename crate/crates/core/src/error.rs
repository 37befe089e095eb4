use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// The requested false accept rate cannot be resolved with the available
    /// negative pairs (fewer than `1 / far` of them).
    #[error("unresolvable FAR {far}: {negatives} negative pairs, {positives} positive pairs")]
    UnresolvableFar {
        far: f64,
        negatives: usize,
        positives: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
