//! Differential of the solution map `y ↦ β̂(y)` and the degrees-of-freedom
//! estimate `tr(X_I d(y))` derived from it.
//!
//! On the block support `I` of a certified solution the differential is
//!
//! ```text
//! d(y) = (X_I^T X_I + λ δ_β̂ ∘ P_β̂)^{-1} X_I^T
//! ```
//!
//! and it vanishes off the support. The system matrix is symmetric positive
//! definite whenever `X_I` has full column rank, so it is solved by Cholesky.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::blocks::{delta_p_matrix, BlockPartition, BlockSupport};
use crate::error::{Error, Result};
use crate::solver::{Problem, Solution};

/// Relative thresholds below which a margin is reported as a transition warning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProximityThresholds {
    /// Warn when `transition_margin < transition_rel * λ`.
    pub transition_rel: f64,
    /// Warn when `support_margin < support_rel * max|β̂_i|`.
    pub support_rel: f64,
}

impl Default for ProximityThresholds {
    fn default() -> Self {
        Self {
            transition_rel: 1e-6,
            support_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionProximity {
    /// `min_{b∉I} (λ − ‖X_b^T r‖)`, clamped at zero; infinite when every block is active.
    pub transition_margin: f64,
    /// `min_{b∈I} ‖β̂_b‖`; infinite on an empty support.
    pub support_margin: f64,
    pub warning: bool,
}

/// Distance of a solution to the transition set where its support can change.
pub fn transition_proximity(
    problem: &Problem,
    solution: &Solution,
    thresholds: &ProximityThresholds,
) -> TransitionProximity {
    let support = &solution.support;
    let partition = problem.partition();
    let beta = solution.beta.values();
    let beta_i = support.extend(&support.restrict(beta));
    let r = problem.y() - problem.design().matrix() * &beta_i;
    let corr = problem.design().matrix().tr_mul(&r);

    let transition_margin = support
        .inactive()
        .map(|b| (problem.lambda() - partition.block_norm(&corr, b)).max(0.0))
        .fold(f64::INFINITY, f64::min);
    let support_margin = support
        .active()
        .iter()
        .map(|&b| partition.block_norm(beta, b))
        .fold(f64::INFINITY, f64::min);
    let warning = transition_margin < thresholds.transition_rel * problem.lambda()
        || support_margin < thresholds.support_rel * beta.amax();
    TransitionProximity {
        transition_margin,
        support_margin,
        warning,
    }
}

/// The differential `d(y)` restricted to the active coordinates.
#[derive(Debug, Clone)]
pub struct Differential {
    /// `|I| × Q`, rows in the compact order of `support`.
    pub matrix: DMatrix<f64>,
    pub support: BlockSupport,
    /// Ratio of extreme eigenvalues of the linear system; 1 on an empty support.
    pub condition_estimate: f64,
    /// The Cholesky factorization failed and an LU solve was used instead.
    pub used_fallback: bool,
}

impl Differential {
    /// The full `N × Q` Jacobian of `β̂`, zero on inactive rows.
    pub fn full(&self) -> DMatrix<f64> {
        let partition = self.support.partition();
        let mut full = DMatrix::zeros(partition.total_dim(), self.matrix.ncols());
        for (k, i) in self.support.coords().into_iter().enumerate() {
            full.set_row(i, &self.matrix.row(k));
        }
        full
    }
}

/// System matrix `X_I^T X_I + λ δ∘P` on the support of `solution`.
pub fn sensitivity_matrix(problem: &Problem, solution: &Solution) -> Result<DMatrix<f64>> {
    let support = &solution.support;
    let beta_i = support.restrict(solution.beta.values());
    let gram_ii = support.principal(problem.design().gram());
    Ok(gram_ii + delta_p_matrix(support, &beta_i)? * problem.lambda())
}

/// Local differential of the solution map at a certified solution.
pub fn differential(problem: &Problem, solution: &Solution) -> Result<Differential> {
    let support = solution.support.clone();
    let q = problem.design().rows();
    if support.is_empty() {
        return Ok(Differential {
            matrix: DMatrix::zeros(0, q),
            support,
            condition_estimate: 1.0,
            used_fallback: false,
        });
    }
    let system = sensitivity_matrix(problem, solution)?;
    let rhs = support.columns(problem.design().matrix()).transpose();

    let eig = SymmetricEigen::new(system.clone()).eigenvalues;
    let (min, max) = (eig.min(), eig.max());
    let condition_estimate = if min > 0.0 { max / min } else { f64::INFINITY };

    let (matrix, used_fallback) = match system.clone().cholesky() {
        Some(chol) => (chol.solve(&rhs), false),
        None => {
            let solved = system.lu().solve(&rhs).ok_or_else(|| {
                Error::Factorization(format!(
                    "sensitivity system is singular (eigenvalues in [{min:e}, {max:e}])"
                ))
            })?;
            (solved, true)
        }
    };
    Ok(Differential {
        matrix,
        support,
        condition_estimate,
        used_fallback,
    })
}

/// Divergence of `μ̂ = Xβ̂` and transition diagnostics.
#[derive(Debug, Clone)]
pub struct DofReport {
    pub divergence: f64,
    pub support: BlockSupport,
    pub transition_margin: f64,
    pub support_margin: f64,
    pub condition_estimate: f64,
    pub warning: bool,
}

#[derive(Serialize)]
struct DofReportRecord<'a> {
    divergence: f64,
    active_blocks: &'a [usize],
    active_dim: usize,
    transition_margin: f64,
    support_margin: f64,
    condition_estimate: f64,
    warning: bool,
}

impl Serialize for DofReport {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        DofReportRecord {
            divergence: self.divergence,
            active_blocks: self.support.active(),
            active_dim: self.support.active_dim(),
            transition_margin: self.transition_margin,
            support_margin: self.support_margin,
            condition_estimate: self.condition_estimate,
            warning: self.warning,
        }
        .serialize(serializer)
    }
}

pub fn dof_estimate(problem: &Problem, solution: &Solution) -> Result<DofReport> {
    dof_estimate_with(problem, solution, &ProximityThresholds::default())
}

pub fn dof_estimate_with(
    problem: &Problem,
    solution: &Solution,
    thresholds: &ProximityThresholds,
) -> Result<DofReport> {
    let d = differential(problem, solution)?;
    let x_i = d.support.columns(problem.design().matrix());
    // tr(X_I M) = Σ_{k,i} X_I[i,k] M[k,i]
    let divergence = if d.support.is_empty() {
        0.0
    } else {
        x_i.transpose().component_mul(&d.matrix).sum()
    };
    let proximity = transition_proximity(problem, solution, thresholds);
    Ok(DofReport {
        divergence,
        support: d.support,
        transition_margin: proximity.transition_margin,
        support_margin: proximity.support_margin,
        condition_estimate: d.condition_estimate,
        warning: proximity.warning || d.used_fallback,
    })
}

/// Degrees of freedom of block soft thresholding (`X = Id`):
/// `Σ_{b: ‖y_b‖>λ} (|b| − λ(|b|−1)/‖y_b‖)`.
pub fn dof_identity_closed_form(y: &DVector<f64>, lambda: f64, partition: &BlockPartition) -> f64 {
    (0..partition.num_blocks())
        .filter_map(|b| {
            let norm = partition.block_norm(y, b);
            let size = partition.block(b).len() as f64;
            (norm > lambda).then(|| size - lambda * (size - 1.0) / norm)
        })
        .sum()
}
