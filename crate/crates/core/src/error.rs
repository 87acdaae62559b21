use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("dimension mismatch for `{name}`: expected {expected}, got {actual}")]
    Dimension {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("cell kind mismatch: parameters are {params}, trace/state is {other}")]
    KindMismatch {
        params: &'static str,
        other: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("interpretability requires a NeuroView head, model has a {0} head")]
    NotNeuroView(&'static str),

    #[error("class {class} has an all-zero weight row")]
    ZeroNormRow { class: usize },

    #[error("training diverged at epoch {epoch}: mean loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn dim(name: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            name: name.into(),
            expected,
            actual,
        }
    }
}
