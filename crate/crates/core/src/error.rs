use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeReused,

    #[error("finite-difference oracle is invalid: {0}")]
    OracleValidity(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("loss diverged (non-finite value {value}) at window {window}")]
    Divergence { window: usize, value: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("incompatible: {0}")]
    Compatibility(String),

    #[error("anchor token {anchor:?} is not in the vocabulary")]
    Anchor { anchor: String, nearest: Vec<String> },

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("unknown feature name {0:?}")]
    Naming(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
