use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// `|A x - b|` fell below the singularity guard, so `log((A x - b)^2 / 2)` is undefined.
    #[error("regression singularity: |A*x - b| = {residual:e} at coordinate {coord}")]
    Singularity { coord: usize, residual: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("regression model requires per-client constants (A, b)")]
    MissingConstants,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid data generation request: {0}")]
    InvalidData(String),

    #[error("client {client} received zero samples")]
    EmptyClient { client: usize },

    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),

    #[error("inclusion probability n*p = {value} exceeds 1 for client {client}; cap first")]
    InclusionOverflow { client: usize, value: f64 },

    #[error("invalid sampling request: {0}")]
    InvalidSampling(String),

    #[error("aggregation mismatch: {0}")]
    AggregationMismatch(String),

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}
