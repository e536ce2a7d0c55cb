//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or model shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or intermediate value left the finite range.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Checkpoint was produced by a different architecture manifest.
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    /// Dataset loading or generation failure.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Evaluation cannot proceed (e.g. empty ground truth).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
