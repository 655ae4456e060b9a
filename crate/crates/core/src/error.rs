use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsatisfiable imbalance: class {class} would keep {count} samples (need at least 1)")]
    UnsatisfiableImbalance { class: usize, count: u64 },

    #[error("class {class} has {available} samples but the plan requires {required}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("batch of {0} samples is too small (need at least 2)")]
    BatchTooSmall(usize),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid class prior: {0}")]
    InvalidPrior(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
