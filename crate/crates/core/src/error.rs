use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An internal precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed volume: {reason}")]
    Volume { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (sample {sample})")]
    NonFiniteLoss { epoch: usize, step: usize, sample: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("unknown volume id {0:?}")]
    UnknownVolume(String),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
