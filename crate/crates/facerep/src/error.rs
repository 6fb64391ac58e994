//! Error taxonomy of the std layer, mapped onto the CLI exit codes.

use std::path::PathBuf;

/// Exit code 2: the inputs were readable but violate a contract.
/// Exit code 3: something could not be read/written or decoded.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("fixture mismatch: {0}")]
    Fixture(String),
    #[error(transparent)]
    Core(#[from] facerep_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), offset, message: message.into() }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => 3,
            Error::Protocol(_) | Error::Fixture(_) => 2,
            Error::Core(e) => match e {
                facerep_core::Error::Data(_) => 3,
                _ => 2,
            },
        }
    }
}
