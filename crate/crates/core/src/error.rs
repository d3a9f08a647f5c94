use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed JSON: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dialogue `{dialogue}`: {violations}")]
    Validation { dialogue: String, violations: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("external encoder not configured: {0}")]
    AdapterNotConfigured(String),

    #[error("external encoder call failed: {0}")]
    AdapterCallFailed(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    KindMismatch { expected: String, found: String },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("dialogue `{0}` has no scorable context-response pairs")]
    Aggregation(String),

    #[error("spearman: {0}")]
    Correlation(String),

    #[error("probe: {0}")]
    Probe(String),

    #[error("degenerate scatter: {0}")]
    DegenerateScatter(String),

    #[error("{path}: {source}")]
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
