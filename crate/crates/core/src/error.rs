use thiserror::Error;

use crate::tensor::TensorError;

/// Crate-wide error. [`Error::category`] gives the machine-readable class
/// reported by the command line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("encoding: {path} line {line} is not valid UTF-8")]
    Encoding { path: String, line: usize },
    #[error("parse: {path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("spec: {0}")]
    Spec(String),
    #[error("config: {0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("data: {0}")]
    Data(String),
    #[error("comparison: {0}")]
    Comparison(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("cache integrity: {0}")]
    Integrity(String),
    #[error("stage {stage} failed for variant {variant}: {source}")]
    Stage {
        stage: String,
        variant: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Shape { .. }) => "shape",
            Error::Tensor(TensorError::Index { .. }) => "index",
            Error::Tensor(TensorError::Precondition { .. }) => "precondition",
            Error::Tensor(TensorError::State(_)) => "state",
            Error::Tensor(TensorError::Format(_)) => "format",
            Error::Io { .. } => "io",
            Error::Ingestion(_) => "ingestion",
            Error::Alignment(_) => "alignment",
            Error::Encoding { .. } => "encoding",
            Error::Parse { .. } => "parse",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Training { .. } => "training",
            Error::Evaluation(_) => "evaluation",
            Error::Data(_) => "data",
            Error::Comparison(_) => "comparison",
            Error::Manifest(_) => "manifest",
            Error::Integrity(_) => "integrity",
            Error::Stage { source, .. } => source.category(),
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
