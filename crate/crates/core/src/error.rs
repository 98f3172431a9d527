use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A row of an input file could not be parsed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// Input parsed, but violates a data invariant (duplicates, empty result, ...).
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Non-finite values showed up during optimization.
    #[error("training diverged at epoch {epoch}, user {user}: {reason}")]
    Training {
        epoch: usize,
        user: usize,
        reason: String,
    },
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("grid failure: {0}")]
    Grid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
