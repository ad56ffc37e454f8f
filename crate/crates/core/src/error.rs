use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True when the failure is a non-finite value or an explicit divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format { .. } | Error::Tensor(TensorError::Io(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
