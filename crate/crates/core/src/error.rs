use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CreError>;

#[derive(Debug, Error)]
pub enum CreError {
    #[error("io error on {path}: {source}")]
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

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("entities outside window: sentence of {len} tokens, entities at {head} and {tail}, max length {max_len}")]
    EntitiesOutsideWindow {
        len: usize,
        head: usize,
        tail: usize,
        max_len: usize,
    },

    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss in epoch {epoch}, batch {batch} (pairs: {pairs})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        pairs: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl CreError {
    /// Stable short name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            CreError::Io { .. } => "io",
            CreError::Parse { .. } => "parse",
            CreError::IndexOutOfRange(_) => "index_out_of_range",
            CreError::EmptyDataset(_) => "empty_dataset",
            CreError::Split(_) => "split",
            CreError::EntitiesOutsideWindow { .. } => "entities_outside_window",
            CreError::UnknownEntity(_) => "unknown_entity",
            CreError::Dimension(_) => "dimension",
            CreError::InvalidInput(_) => "invalid_input",
            CreError::Config(_) => "config",
            CreError::NonFiniteLoss { .. } => "non_finite_loss",
            CreError::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CreError::Io {
            path: path.into(),
            source,
        }
    }
}
