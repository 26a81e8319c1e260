use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(
        "training did not converge after {iterations} iterations (KKT violation {violation:e})"
    )]
    NotConverged { iterations: usize, violation: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("numerical error in {layer}: {message}")]
    Numerical { layer: String, message: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        /// Evaluations recorded before the divergence.
        trace: Vec<crate::cnn::TracePoint>,
    },

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("unknown mutant `{0}`")]
    UnknownMutant(String),

    #[error("clean baseline killed by {}", relations.join(", "))]
    BaselineKilled { relations: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
