use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corpus is empty after filtering (min_interactions = {min_interactions})")]
    EmptyCorpus { min_interactions: usize },
    #[error("user {user} has {len} interactions; leave-one-out needs at least 3")]
    SequenceTooShort { user: String, len: usize },
    #[error("no group covers sequence length {0}")]
    UncoveredLength(usize),
    #[error("user {user}: cannot inject {wanted} negatives, only {available} items are unseen")]
    NegativesExhausted {
        user: String,
        wanted: usize,
        available: usize,
    },
    #[error("cannot compute metrics over zero users")]
    NoUsers,
    #[error(
        "non-finite loss at epoch {epoch} step {step} ({stage}): {losses}; grad norms: {grad_norms}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        stage: &'static str,
        losses: String,
        grad_norms: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
