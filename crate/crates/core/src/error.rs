use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("search space of {size} joint actions exceeds the cap of {cap}; reduce the search scope")]
    SearchSpace { size: u128, cap: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(what: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} = {value}")))
    }
}
