use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has (near-)zero norm and cannot be normalized")]
    ZeroRow(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dropout rate {0}: must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("batch of size {got} is too small, need at least {min}")]
    BatchTooSmall { got: usize, min: usize },

    #[error("unknown token id {id} (vocabulary size {vocab_size})")]
    UnknownToken { id: usize, vocab_size: usize },

    #[error("unknown word {0:?} is not in the vocabulary")]
    UnknownWord(String),

    #[error("trace does not match encoder parameters: {0}")]
    TraceMismatch(String),

    #[error("missing input for active objective: {0}")]
    MissingInput(String),

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid schedule: warmup_steps ({warmup}) must be < total_steps ({total})")]
    InvalidSchedule { warmup: usize, total: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("train/validation overlap on id {0:?}")]
    OverlapLeak(String),

    #[error("non-finite value at step {step} in term {term}")]
    NonFinite { step: usize, term: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("class {0} has no prompt embeddings")]
    EmptyClass(usize),

    #[error("generation spec invalid: {field}: {reason}")]
    SpecInvalid { field: String, reason: String },

    #[error("NLI generation needs at least two classes")]
    NeedTwoClasses,

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("prompt template {0:?} must contain exactly one {{label}} placeholder")]
    MissingPlaceholder(String),

    #[error("io error on {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
