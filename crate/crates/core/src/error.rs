use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the training, evaluation and data layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not match the configured model.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid argument passed to an operation.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// NaN or infinity encountered where finite values are required.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Training or evaluation steps invoked out of order.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Evaluation could not produce a score.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            path: PathBuf::new(),
            line,
            message: err.to_string(),
        }
    }
}
