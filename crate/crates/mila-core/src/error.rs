//! Crate-wide error type.

/// Errors produced by fitting, integration, simulation, and persistence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Attach the output sample period to an instability report.
    pub fn with_dt(self, dt: f64) -> Self {
        match self {
            Error::Instability(m) => Error::Instability(format!("{m} (dt = {dt})")),
            e => e,
        }
    }
}
