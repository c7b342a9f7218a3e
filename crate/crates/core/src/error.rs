use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Semantic(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown cell {0}")]
    UnknownCell(usize),
    #[error("unknown source {0}")]
    UnknownSource(usize),
    #[error("power flow: {0}")]
    PowerFlow(String),
    #[error("illegal action {action}: {reason}")]
    IllegalAction { action: String, reason: String },
    #[error("oracle refused: {0}")]
    OracleBound(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model: {0}")]
    Model(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] dsr_autodiff::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
