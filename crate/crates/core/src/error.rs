use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the model, data and training pipeline.
#[derive(Debug, Error)]
pub enum DyrexError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training data error for example {qid}: {msg}")]
    TrainingData { qid: String, msg: String },

    #[error("gold span of example {qid} lies beyond the truncation point ({max_len} tokens)")]
    GoldTruncated { qid: String, max_len: usize },

    #[error("numerical failure at step {step}: {msg} (examples: {qids:?})")]
    Numerical {
        step: usize,
        msg: String,
        qids: Vec<String>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DyrexError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DyrexError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        DyrexError::Dimension { op, left, right }
    }
}

pub type Result<T, E = DyrexError> = std::result::Result<T, E>;
