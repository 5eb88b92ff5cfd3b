use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::PathViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("path constraint violated: {0}")]
    Constraint(#[from] PathViolation),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path} line {line}: {detail}")]
    Record {
        path: PathBuf,
        line: usize,
        detail: String,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Training { .. } => 4,
            _ => 3,
        }
    }
}
