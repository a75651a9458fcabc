use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("http request for {symbol} failed: {message}")]
    Http {
        symbol: String,
        message: String,
        /// Transport failures and 5xx/429 responses are worth retrying.
        retryable: bool,
    },

    #[error("symbol {0} is unavailable at the data source")]
    Unavailable(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid bar on {date}: {reason}")]
    InvalidBar { date: NaiveDate, reason: String },

    #[error("feature {field} is non-finite on {date}")]
    NonFiniteFeature { field: &'static str, date: NaiveDate },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scaler error: {0}")]
    Scaler(String),

    #[error("weight file error: {0}")]
    Weights(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Http { retryable: true, .. })
    }
}
