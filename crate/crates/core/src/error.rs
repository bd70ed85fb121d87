use thiserror::Error;

use crate::linalg::Matrix;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: |A - A^T|_F = {deviation:e} exceeds {tolerance:e}")]
    Asymmetric { deviation: f64, tolerance: f64 },

    #[error("requested rank {rank} is outside 1..={n}")]
    InvalidRank { rank: usize, n: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scale s[{index}] = {value:e} is too close to zero")]
    SingularScale { index: usize, value: f64 },

    #[error("column {index} is degenerate: y^T A y = {value:e}")]
    DegenerateColumn { index: usize, value: f64 },

    #[error("linear solve did not reach tolerance after {iterations} iterations (residual {residual:e})")]
    NonconvergedLinearSolve {
        best: Box<Matrix>,
        residual: f64,
        iterations: usize,
    },

    #[error("objective became non-finite at Newton iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("rank {rank}: {source}")]
    AtRank {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("the data matrix D^T D is singular")]
    SingularA,

    #[error("the quadratic eigenvalue problem has no admissible real eigenpair")]
    NoRealCandidate,

    #[error("no rank produced a converged solution ({})", .0.join("; "))]
    AllRanksFailed(Vec<String>),

    #[error("materialized system of order {order} exceeds the limit of {limit}")]
    ResourceLimit { order: usize, limit: usize },

    #[error("no solver succeeded on any problem")]
    NoSuccessfulRun,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_rank(self, rank: usize) -> Self {
        Error::AtRank {
            rank,
            source: Box::new(self),
        }
    }
}
