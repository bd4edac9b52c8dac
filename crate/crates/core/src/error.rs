use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the process exit codes used by the command-line
/// front end (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, topologies or configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// NaN/Inf produced by a forward or backward pass, or a diverged fit.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Stored payloads do not match their recorded digests or sizes.
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 2 config, 3 numerical, 4 integrity; everything else is 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            Error::Integrity(_) => 4,
            Error::Usage(_) | Error::Io { .. } | Error::Serde(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
