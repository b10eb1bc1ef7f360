use std::path::PathBuf;

use lvqa_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Corrupt or inconsistent corpus, dataset or image.
    #[error("data error: {0}")]
    Data(String),
    /// NaN or infinite loss during training.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Parameters that cannot be transferred between two models.
    #[error("incompatible parameters: {}", .0.join("; "))]
    Incompatible(Vec<String>),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
