//! Group Lasso solver: accelerated forward-backward splitting with monotone
//! restart, certified by the exact first-order optimality conditions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::blocks::{block_support, BlockPartition, BlockSupport, Coefficients, Design};
use crate::error::{Error, Result};

/// Blocks below `SUPPORT_REL_TOL * max|beta_i|` are reported as inactive.
pub const SUPPORT_REL_TOL: f64 = 1e-8;

/// One group Lasso instance `min ½‖y − Xβ‖² + λ Σ_b ‖β_b‖`.
#[derive(Debug, Clone)]
pub struct Problem {
    design: Arc<Design>,
    partition: Arc<BlockPartition>,
    y: DVector<f64>,
    lambda: f64,
}

impl Problem {
    pub fn new(
        design: Arc<Design>,
        partition: Arc<BlockPartition>,
        y: DVector<f64>,
        lambda: f64,
    ) -> Result<Self> {
        check_data(&design, &partition, &y)?;
        check_lambda(lambda)?;
        Ok(Self {
            design,
            partition,
            y,
            lambda,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            ..self.clone()
        })
    }

    pub fn with_y(&self, y: DVector<f64>) -> Result<Self> {
        check_data(&self.design, &self.partition, &y)?;
        Ok(Self { y, ..self.clone() })
    }

    pub fn design(&self) -> &Arc<Design> {
        &self.design
    }

    pub fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lambda_max(&self) -> f64 {
        lambda_max(&self.design, &self.partition, &self.y)
    }

    /// `½‖y − Xβ‖² + λ Σ_b ‖β_b‖`.
    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let r = &self.y - self.design.matrix() * beta;
        let penalty: f64 = (0..self.partition.num_blocks())
            .map(|b| self.partition.block_norm(beta, b))
            .sum();
        0.5 * r.norm_squared() + self.lambda * penalty
    }
}

pub(crate) fn check_data(
    design: &Design,
    partition: &BlockPartition,
    y: &DVector<f64>,
) -> Result<()> {
    if y.len() != design.rows() {
        return Err(Error::DimensionMismatch(format!(
            "y has length {} but the design has {} rows",
            y.len(),
            design.rows()
        )));
    }
    if partition.total_dim() != design.cols() {
        return Err(Error::DimensionMismatch(format!(
            "partition covers {} coordinates but the design has {} columns",
            partition.total_dim(),
            design.cols()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("y has a non-finite entry".into()));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Absolute tolerance on the KKT residual.
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub warm_start: Option<DVector<f64>>,
    /// Keep the objective value of every iterate in [`Solution::objective_trace`].
    pub record_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 100_000,
            warm_start: None,
            record_objective: false,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(kkt_tol: f64) -> Self {
        Self {
            kkt_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub beta: Coefficients,
    pub support: BlockSupport,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

impl Solution {
    fn from_iterate(
        problem: &Problem,
        beta: DVector<f64>,
        kkt_tol: f64,
        iterations: usize,
        objective_trace: Vec<f64>,
    ) -> Self {
        let kkt = kkt_check(problem, &beta, kkt_tol);
        let objective = problem.objective(&beta);
        let beta = Coefficients::new(beta, Arc::clone(&problem.partition))
            .expect("iterate length matches the partition");
        let support = block_support(&beta, SUPPORT_REL_TOL * beta.max_abs());
        Self {
            beta,
            support,
            objective,
            kkt_residual: kkt.residual,
            iterations,
            objective_trace,
        }
    }

    /// Fitted response `Xβ̂`.
    pub fn fitted(&self, problem: &Problem) -> DVector<f64> {
        problem.design.matrix() * self.beta.values()
    }
}

/// Proximal map of `threshold·‖·‖₂`: zero when `‖v‖ ≤ threshold`, otherwise
/// `(1 − threshold/‖v‖)·v`.
pub fn block_soft_threshold(v: &DVector<f64>, threshold: f64) -> DVector<f64> {
    assert!(threshold >= 0.0, "threshold must be nonnegative");
    let norm = v.norm();
    if norm <= threshold {
        DVector::zeros(v.len())
    } else {
        v * (1.0 - threshold / norm)
    }
}

/// Applies [`block_soft_threshold`] to every block of `v` in place.
fn shrink_blocks(partition: &BlockPartition, v: &mut DVector<f64>, threshold: f64) {
    for block in partition.blocks() {
        let norm = block.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
        let scale = if norm <= threshold {
            0.0
        } else {
            1.0 - threshold / norm
        };
        for &i in block {
            v[i] *= scale;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    pub residual: f64,
    pub is_optimal: bool,
}

/// First-order optimality residual of `beta`. With `I` the blocks above `tol`
/// and `r = y − X_I β_I` the residual is the larger of the active-block
/// stationarity error `‖X_b^T r − λ β_b/‖β_b‖‖` and the inactive-block dual
/// excess `‖X_b^T r‖ − λ` (clamped at zero).
pub fn kkt_check(problem: &Problem, beta: &DVector<f64>, tol: f64) -> KktCertificate {
    let partition = &problem.partition;
    let coeffs = Coefficients::new(beta.clone(), Arc::clone(partition))
        .expect("beta length matches the partition");
    let support = block_support(&coeffs, tol);
    let beta_i = support.extend(&support.restrict(beta));
    let r = &problem.y - problem.design.matrix() * &beta_i;
    let corr = problem.design.matrix().tr_mul(&r);
    let residual = block_kkt_residual(partition, &support, &beta_i, &corr, problem.lambda);
    KktCertificate {
        residual,
        is_optimal: residual <= tol,
    }
}

fn block_kkt_residual(
    partition: &BlockPartition,
    support: &BlockSupport,
    beta: &DVector<f64>,
    corr: &DVector<f64>,
    lambda: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (b, block) in partition.blocks().iter().enumerate() {
        if support.contains(b) {
            let norm = partition.block_norm(beta, b);
            let err = block
                .iter()
                .map(|&i| {
                    let d = corr[i] - lambda * beta[i] / norm;
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            worst = worst.max(err);
        } else {
            worst = worst.max(partition.block_norm(corr, b) - lambda);
        }
    }
    worst
}

/// `max_b ‖X_b^T y‖`, the smallest λ for which `β = 0` is optimal.
pub fn lambda_max(design: &Design, partition: &BlockPartition, y: &DVector<f64>) -> f64 {
    let corr = design.matrix().tr_mul(y);
    (0..partition.num_blocks())
        .map(|b| partition.block_norm(&corr, b))
        .fold(0.0, f64::max)
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power iteration.
pub fn largest_eigenvalue(m: &DMatrix<f64>, rel_tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    // deterministic start with components along every axis
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * (i as f64 + 1.0).sqrt());
    v.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= rel_tol * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Solves the group Lasso problem and certifies the result.
pub fn solve(problem: &Problem, opts: &SolverOptions) -> Result<Solution> {
    let n = problem.design.cols();
    if let Some(w) = &opts.warm_start {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "warm start has length {} but the design has {n} columns",
                w.len()
            )));
        }
    }
    if problem.design.is_identity() {
        return Ok(solve_identity(problem, opts));
    }

    let gram = problem.design.gram();
    let xty = problem.design.matrix().tr_mul(&problem.y);
    let lipschitz = largest_eigenvalue(gram, 1e-10, 10_000);
    let step = 1.0 / lipschitz;
    let threshold = problem.lambda * step;

    let forward_backward = |point: &DVector<f64>| -> DVector<f64> {
        let grad = gram * point - &xty;
        let mut next = point - grad * step;
        shrink_blocks(&problem.partition, &mut next, threshold);
        next
    };
    let certify = |beta: &DVector<f64>| -> f64 {
        let coeffs = Coefficients::new(beta.clone(), Arc::clone(&problem.partition))
            .expect("iterate length matches the partition");
        let support = block_support(&coeffs, opts.kkt_tol);
        let beta_i = support.extend(&support.restrict(beta));
        let corr = &xty - gram * &beta_i;
        block_kkt_residual(&problem.partition, &support, &beta_i, &corr, problem.lambda)
    };

    let mut x = opts
        .warm_start
        .clone()
        .unwrap_or_else(|| DVector::zeros(n));
    let mut fx = problem.objective(&x);
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(fx);
    }
    if let Some(sol) = certified(problem, &x, certify(&x), opts, 0, &trace) {
        return Ok(sol);
    }

    let mut momentum_point = x.clone();
    let mut t = 1.0_f64;
    for iter in 1..=opts.max_iter {
        let candidate = forward_backward(&momentum_point);
        let f_candidate = problem.objective(&candidate);
        if f_candidate <= fx {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            momentum_point = &candidate + (&candidate - &x) * ((t - 1.0) / t_next);
            x = candidate;
            fx = f_candidate;
            t = t_next;
        } else {
            // Monotone restart: drop momentum and take a plain step from x. With
            // step 1/L that step never increases the objective, so it is taken
            // even when round-off makes the evaluated objective tick up.
            t = 1.0;
            x = forward_backward(&x);
            fx = problem.objective(&x);
            momentum_point = x.clone();
        }
        if opts.record_objective {
            trace.push(fx);
        }
        if let Some(sol) = certified(problem, &x, certify(&x), opts, iter, &trace) {
            return Ok(sol);
        }
    }
    let best = Solution::from_iterate(problem, x, opts.kkt_tol, opts.max_iter, trace);
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        kkt_residual: best.kkt_residual,
        best: Box::new(best),
    })
}

/// The in-loop check uses the Gram matrix; a passing iterate is re-certified
/// from `X` directly and iteration continues if the two disagree.
fn certified(
    problem: &Problem,
    x: &DVector<f64>,
    gram_residual: f64,
    opts: &SolverOptions,
    iterations: usize,
    trace: &[f64],
) -> Option<Solution> {
    if gram_residual > opts.kkt_tol {
        return None;
    }
    let sol = Solution::from_iterate(problem, x.clone(), opts.kkt_tol, iterations, trace.to_vec());
    (sol.kkt_residual <= opts.kkt_tol).then_some(sol)
}

/// With `X = Id` the minimizer is the block soft thresholding of `y`.
fn solve_identity(problem: &Problem, opts: &SolverOptions) -> Solution {
    let mut beta = problem.y.clone();
    shrink_blocks(&problem.partition, &mut beta, problem.lambda);
    let trace = if opts.record_objective {
        vec![problem.objective(&beta)]
    } else {
        Vec::new()
    };
    Solution::from_iterate(problem, beta, opts.kkt_tol, 1, trace)
}
