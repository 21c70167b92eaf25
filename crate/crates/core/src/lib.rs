//! Group Lasso regression with a certified solver, the closed-form differential
//! of the solution map with respect to the observations, the resulting unbiased
//! degrees-of-freedom estimate, and risk criteria (SURE, GCV, Cp, AIC) for
//! choosing the regularization parameter.
//!
//! Finite-difference and Monte Carlo oracles in [`validate`] check the
//! differential and the unbiasedness of the estimate numerically.

pub mod blocks;
pub mod datagen;
pub mod dof;
pub mod error;
pub mod problem_file;
pub mod risk;
pub mod solver;
pub mod validate;

pub use blocks::{BlockPartition, BlockSupport, Coefficients, Design};
pub use dof::{dof_estimate, DofReport};
pub use error::{Error, Result};
pub use solver::{solve, Problem, Solution, SolverOptions};
