use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or shape mismatch detected before running a computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion problems (missing files, corrupt records, inconsistent label spaces).
    #[error("data error: {0}")]
    Data(String),

    /// Artifact persistence problems (version/checksum mismatch, malformed container).
    #[error("artifact error: {0}")]
    Artifact(String),

    /// A loss became non-finite; the training step is aborted.
    #[error("non-finite loss in {term}: {value} at step {step}")]
    NonFinite {
        term: &'static str,
        value: f64,
        step: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn artifact(msg: impl Into<String>) -> Self {
        Error::Artifact(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
