use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{param}` of `{perturbation}` = {value} outside hard range [{min}, {max}]")]
    ParamOutOfRange {
        perturbation: String,
        param: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("unknown perturbation `{0}`")]
    UnknownPerturbation(String),

    #[error("objective returned non-finite value {value} at genome {genome:?}")]
    NonFinite { value: f64, genome: Vec<f64> },

    #[error("optimization aborted after {evaluations} evaluations: {source}")]
    Aborted {
        evaluations: usize,
        #[source]
        source: Box<Error>,
        partial: Box<crate::optimize::OptResult>,
    },

    #[error("malformed {kind} in {path} at byte {offset}: {message}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("model error: {message}")]
    Model {
        message: String,
        diagnostics: String,
    },

    #[error("model request timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
