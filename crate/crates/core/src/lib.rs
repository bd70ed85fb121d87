#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Positive semi-definite total least squares.
//!
//! Given data and target matrices `D, T` (`m x n`, `m >= n`), find a symmetric
//! PSD `X` with `D X ~ T` when both `D` and `T` carry error. A rank-`r`
//! solution is written `X = Y S^2 Y^T` with orthonormal `Y` and is computed by
//! Newton iteration on the Stiefel manifold ([`newton`]). The rank-one case
//! also has a quadratic-eigenvalue route ([`qep`]). [`drivers`] sweeps ranks,
//! solves the minimum-rank problem and fits correlation matrices. [`bench`]
//! generates seeded instances and computes performance profiles.

pub mod bench;
pub mod drivers;
pub mod error;
pub mod io;
pub mod krylov;
pub mod linalg;
pub mod newton;
pub mod objective;
pub mod qep;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use newton::{solve_rank_r, Backend, RankRSolution, SolverConfig};
pub use objective::{FactorPair, ProblemInstance, ReducedProblem};
