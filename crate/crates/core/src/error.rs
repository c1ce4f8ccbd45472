use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shape and numeric failures raised by the tensor tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid scene graph: {0}")]
    Graph(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("{0}")]
    Validation(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (files, config, schema) rather than
    /// failures during computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Geometry(_)
            | Error::Graph(_)
            | Error::Config(_)
            | Error::Dataset { .. }
            | Error::Validation(_)
            | Error::Json(_)
            | Error::Checkpoint(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            Error::Tensor(_) | Error::Io { .. } => false,
        }
    }
}
