//! Crate-wide error type.

use thiserror::Error;

use crate::searchspace::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric precondition was violated (non-finite input, bad range).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration is inconsistent with the data or the requested run.
    #[error("configuration error: {0}")]
    Config(String),

    /// A genotype failed structural validation.
    #[error("invalid genotype:\n{0}")]
    InvalidGenotype(ValidationReport),

    /// Itemized per-sample failures while loading a dataset.
    #[error("dataset load failed with {} error(s):\n{}", .0.len(), .0.join("\n"))]
    DatasetLoad(Vec<String>),

    /// Training diverged; carries the component breakdown for diagnosis.
    #[error("non-finite loss ({0}); learning rate too high or bad data")]
    NonFiniteLoss(String),

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code contract: 1 for usage/config problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
