use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Validation {
        file: String,
        line: usize,
        message: String,
    },

    #[error("knowledge graph is already inverse-augmented")]
    AlreadyAugmented,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds the model context of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("view does not end with an eos marker")]
    MissingEosMarker,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step} (explicit batch {explicit:?}, implicit batch {implicit:?})")]
    NonFiniteLoss {
        step: u64,
        explicit: Vec<usize>,
        implicit: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
