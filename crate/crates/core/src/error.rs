use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("system is not stable (spectral radius {0})")]
    Unstable(f64),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid predictor: {0}")]
    InvalidPredictor(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("inadmissible lambda: {0}")]
    InadmissibleLambda(String),
    #[error("MCMC tuning failure: {0}")]
    Tuning(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error stems from bad user input rather than a numerical failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_) | Error::Domain(_))
    }
}
