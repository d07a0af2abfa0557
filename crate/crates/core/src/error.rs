use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("undefined geometry: {0}")]
    Geometry(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable, machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::NotPositiveDefinite(_) => "non-psd",
            Error::Singular(_) => "singular-matrix",
            Error::Usage(_) => "usage",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::Geometry(_) => "geometry",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Estimation(_) => "estimation",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
