//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container bytes, manifest JSON or missing tensor file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Data that parses but breaks a dataset invariant.
    #[error("validation error in scene {scene}: {msg}")]
    Validation { scene: usize, msg: String },

    /// Validation failures that are not tied to a single scene.
    #[error("validation error: {0}")]
    InvalidData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("matching error: {0}")]
    Match(String),

    #[error("shift error: {0}")]
    Shift(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn validation(scene: usize, msg: impl Into<String>) -> Self {
        Error::Validation {
            scene,
            msg: msg.into(),
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
