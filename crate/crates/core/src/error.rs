use std::path::PathBuf;

use thiserror::Error;
use voxgraph_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this error: 1 usage or configuration, 2 data
    /// or IO, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Tensor(TensorError::ShapeMismatch { .. } | TensorError::InvalidArgument { .. } | TensorError::Unsupported { .. }) => 1,
            Error::Numerical(_) | Error::Tensor(TensorError::NonScalarLoss(_)) => 3,
            _ => 2,
        }
    }
}
