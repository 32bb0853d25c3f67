use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix `{what}` is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { what: &'static str, jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no usable rows in input")]
    EmptyData,

    #[error("model file {path:?}: {message}")]
    ModelFormat { path: Option<PathBuf>, message: String },

    #[error("optimizer produced a non-finite state at iteration {0}")]
    NonFinite(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::DimensionMismatch(_)
                | Error::Parse { .. }
                | Error::EmptyData
                | Error::InvalidParameter(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
