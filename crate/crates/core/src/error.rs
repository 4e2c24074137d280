use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("mask has no known pixels")]
    AllHole,
    #[error("region is empty")]
    EmptyRegion,
    #[error("no homography: {0}")]
    NoHomography(String),
    #[error("insufficient matches: {found} usable correspondences, need at least 4")]
    InsufficientMatches { found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("hole generation failed: {0}")]
    HoleGeneration(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
