use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid construction parameters (schedule, environment, training config).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shapes, empty batches, acting after done).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Stored or supplied tensors disagree with the expected dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A value left the representable range (non-finite loss, degenerate normalizer).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    /// Files that parse but disagree with the expected schema or invariants.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
