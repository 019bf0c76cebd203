use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("coordinate descent did not converge after {iterations} iterations (last update {last_update:e})")]
    Convergence { iterations: usize, last_update: f64 },

    #[error("non-finite value at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("stratification failure: {0}")]
    Stratification(String),

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: unsupported format version {found:?} (expected {expected:?})")]
    FormatVersion {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for this error: 1 for input/config problems, 2 for
    /// numerical or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Convergence { .. } | Error::Numerical { .. } => 2,
            Error::Frame { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
