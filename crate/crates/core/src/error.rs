use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for dataset of size {len}")]
    Index { index: usize, len: usize },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("neighbor indices must satisfy i < j, got i={i}, j={j}")]
    Ordering { i: usize, j: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("insufficient data: need at least {required} samples, got {n}")]
    InsufficientData { n: usize, required: usize },

    #[error("iterate diverged (non-finite) at step {step}")]
    Divergence { step: usize },

    #[error("coupling error: {0}")]
    Coupling(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training failed on neighbor of index {index}: {source}")]
    Training {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
