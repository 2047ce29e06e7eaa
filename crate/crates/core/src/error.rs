use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("iteration did not converge: {0}")]
    NotConverged(String),

    #[error("kernel build failed: {0}")]
    KernelBuild(String),

    #[error("linear program is infeasible: {0}")]
    Infeasible(String),

    #[error("linear program is unbounded: {0}")]
    Unbounded(String),

    #[error("degenerate test basis: {0}")]
    DegenerateBasis(String),

    #[error("rotation target {0:?} lies outside the numerical rotation set")]
    OutsideRotationSet(Vec<f64>),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
