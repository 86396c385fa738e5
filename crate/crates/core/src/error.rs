use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an out-of-contract argument (shapes, ranges, sizes).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input file is not something we can decode.
    #[error("format error: {0}")]
    Format(String),

    /// Input file decodes structurally but its content is damaged.
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("generation error: {0}")]
    Generation(String),

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
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for bad parameters, 3 for bad
    /// input files, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Range(_) | Error::Training(_) | Error::Generation(_) => 2,
            Error::Format(_) | Error::Corruption(_) | Error::Json { .. } => 3,
            Error::Io { .. } => 1,
        }
    }
}
