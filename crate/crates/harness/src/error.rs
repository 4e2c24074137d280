use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] refill_core::error::Error),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("region is empty")]
    EmptyRegion,
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("no usable hole after {attempts} attempts (last fraction {fraction:.3})")]
    HoleGeneration { attempts: usize, fraction: f64 },
    #[error("no quadruples found in {0}")]
    EmptyCorpus(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
