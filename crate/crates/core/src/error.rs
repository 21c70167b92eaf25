use thiserror::Error;

use crate::solver::Solution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid block partition: {0}")]
    InvalidPartition(String),

    #[error("invalid design matrix: {0}")]
    InvalidDesign(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A block on the support has zero Euclidean norm, so its direction is undefined.
    #[error("block {block} has zero norm on the support")]
    DegenerateBlock { block: usize },

    #[error(
        "solver did not certify optimality after {iterations} iterations (kkt residual {kkt_residual:e})"
    )]
    NotConverged {
        iterations: usize,
        kkt_residual: f64,
        best: Box<Solution>,
    },

    #[error("linear system is not numerically solvable: {0}")]
    Factorization(String),

    /// The block support changed between two finite-difference probe points.
    #[error("block support changed at probe coordinate {coordinate} (transition crossing)")]
    TransitionCrossing { coordinate: usize },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("problem file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
