use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: {left:?} vs {right:?}")]
    Dtype {
        op: &'static str,
        left: crate::tensor::Dtype,
        right: crate::tensor::Dtype,
    },

    #[error("index out of bounds in {op}: {detail}")]
    Bounds { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("unbalanced region: {0}")]
    Region(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("saved state does not match: {0}")]
    Mismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config file {path}: key `{key}`: {msg}")]
    ConfigKey { path: PathBuf, key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("end of data: need {needed} tokens at cursor {cursor}, file has {available}")]
    EndOfData {
        cursor: usize,
        needed: usize,
        available: usize,
    },

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("divisibility violated: {0}")]
    Divisibility(String),

    #[error("budget of {budget} bytes is too small (needs {needed} at the smallest sequence length)")]
    BudgetTooSmall { budget: u64, needed: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
