use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the filters and the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("sliding window is full ({0} poses)")]
    WindowFull(usize),
    #[error("sliding window is empty")]
    EmptyWindow,
    #[error("point behind camera (depth {0})")]
    Cheirality(f64),
    #[error("feature Jacobian is rank deficient")]
    RankDeficient,
    #[error("out-of-order timestamp {t} (last processed {last})")]
    OutOfOrder { t: f64, last: f64 },
    #[error("pipeline is not initialized")]
    Uninitialized,
    #[error("IMU is moving during the static initialization prefix: {0}")]
    NotStatic(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Errors raised while reading or writing dataset files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl ToString) -> Self {
        IoError::Parse {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }

    pub(crate) fn invalid(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        IoError::Invalid {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
