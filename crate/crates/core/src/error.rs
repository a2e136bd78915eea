use thiserror::Error;

use crate::quantizer::QuantizerError;
use crate::sid_index::IndexError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("model: {0}")]
    Model(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Quantizer(_) => "quantizer",
            Error::Index(_) => "index",
            Error::Model(_) => "model",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
