//! Skull-stripping segmentation: a small tensor library with reverse-mode
//! differentiation, a U-Net with residual stages and optional scSE attention,
//! and the data, training and evaluation pieces around it.

pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

use std::path::PathBuf;

pub use tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::Training(_) => "training",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
