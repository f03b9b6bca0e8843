use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {0} is not in the model vocabulary")]
    UnknownToken(String),
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
    #[error("remote protocol error: {0}")]
    Protocol(String),
    #[error("server error ({status}): {message}")]
    ServerError { status: u16, message: String },

    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("model order {0} is outside [1, 16]")]
    OrderOutOfRange(usize),
    #[error("empty score: at least one token is required")]
    EmptyScore,
    #[error("metric {0} needs a reference model that was not supplied")]
    MissingReferenceModel(&'static str),

    #[error("context pool is empty")]
    EmptyPool,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query string is empty")]
    EmptyQuery,
    #[error("candidate has {0} words; fuzzy verification needs at least 3")]
    TooShort(usize),
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),

    #[error("pool of {available} samples is smaller than the {pick} to select")]
    PoolTooSmall { available: usize, pick: usize },
    #[error("label references unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("unknown category {0:?}")]
    InvalidCategory(String),
    #[error("conflicting labels for candidate {0:?}")]
    LabelConflict(String),

    #[error("canary id collision could not be resolved after {0} attempts")]
    IdCollision(usize),
    #[error("canary prefix already occurs in the background corpus")]
    PrefixPresentInBackground,
    #[error("canary manifest check failed: {0}")]
    ManifestInvalid(String),

    #[error("invalid config: {0}")]
    Config(String),
    #[error("unsupported file format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Bincode(#[from] bincode::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
