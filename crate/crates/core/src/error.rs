use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("document has no tokens")]
    EmptyDocument,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("numerical failure at iteration {iteration}: {what}")]
    Numerical { iteration: usize, what: String },

    #[error("training diverged at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported checkpoint format {found:?} (expected {expected:?})")]
    VersionMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

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
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
