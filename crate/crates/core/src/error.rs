use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, layer sequences or insertion plans that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad user-supplied values: labels out of range, levels out of range, etc.
    #[error("input error: {0}")]
    Input(String),

    /// Misuse of an API contract, e.g. running backward twice on one graph.
    #[error("usage error: {0}")]
    Usage(String),

    /// An operation was attempted from the wrong deployment stage.
    #[error("stage error: expected {expected}, found {found}")]
    Stage { expected: String, found: String },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("ingestion error in {}: {detail}", path.display())]
    Ingest { path: PathBuf, detail: String },

    #[error("corrupt container {}: {detail}", path.display())]
    Corrupt { path: PathBuf, detail: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
