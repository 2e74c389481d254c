use std::path::PathBuf;

use insightr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("degenerate head: {0}")]
    DegenerateHead(String),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite {component} at cycle {cycle}, stage {stage}, epoch {epoch}")]
    NonFinite {
        component: String,
        cycle: usize,
        stage: String,
        epoch: usize,
    },
    #[error("non-finite loss component {0}")]
    NonFiniteComponent(&'static str),
    #[error("degenerate spread: {0}")]
    DegenerateSpread(String),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
