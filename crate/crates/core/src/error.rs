use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("CFL violation at t = {time:.6}: number {cfl:.4} exceeds {limit}")]
    Cfl { time: f64, cfl: f64, limit: f64 },
    #[error("non-finite values in field at t = {0:.6}")]
    NonFinite(f64),
    #[error("noise basis is rank deficient at raw element {index}")]
    RankDeficient { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
