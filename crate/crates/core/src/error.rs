use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("tridiagonal system is singular at row {row}")]
    SingularSystem { row: usize },

    #[error("non-positive solution value {value:e} at node {node}; refine the grid")]
    NonPositiveSolution { node: usize, value: f64 },

    #[error("trajectory {index} in the batch was truncated before reaching the target set")]
    TruncatedTrajectory { index: usize },

    #[error("trajectory {index} was not generated by the differentiated parameters (step {step})")]
    OffPolicyBatch { index: usize, step: usize },

    #[error("all {0} trajectories were truncated; statistics are undefined")]
    AllTruncated(usize),

    #[error("malformed parameter file: {0}")]
    ParseParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
