//! Independent numerical oracles for the differential and the DOF estimate:
//! central finite differences of the solution map, and Monte Carlo estimates
//! of `Σ_i cov(y_i, μ̂_i)/σ²` under Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::BlockSupport;
use crate::datagen::Scenario;
use crate::dof::{dof_estimate_with, ProximityThresholds};
use crate::error::{Error, Result};
use crate::solver::{lambda_max, solve, Problem, SolverOptions};

/// `1e-5 · max(1, ‖y‖∞)`.
pub fn default_fd_step(y: &DVector<f64>) -> f64 {
    1e-5 * y.amax().max(1.0)
}

/// Solver settings for oracle solves; tight enough that differencing noise
/// stays well below the comparison tolerance.
pub fn oracle_solver_options() -> SolverOptions {
    SolverOptions::with_tol(1e-14)
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    Ok(())
}

fn perturbed(problem: &Problem, i: usize, delta: f64) -> Result<Problem> {
    let mut y = problem.y().clone();
    y[i] += delta;
    problem.with_y(y)
}

/// `Σ_i [μ̂(y + h e_i) − μ̂(y − h e_i)]_i / 2h`.
pub fn fd_divergence(problem: &Problem, h: f64, opts: &SolverOptions) -> Result<f64> {
    check_step(h)?;
    let q = problem.design().rows();
    let mut total = 0.0;
    for i in 0..q {
        let plus = perturbed(problem, i, h)?;
        let minus = perturbed(problem, i, -h)?;
        let mu_plus = solve(&plus, opts)?.fitted(&plus)[i];
        let mu_minus = solve(&minus, opts)?.fitted(&minus)[i];
        total += (mu_plus - mu_minus) / (2.0 * h);
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct FdJacobian {
    /// `|I| × Q`, rows in the compact order of `support`.
    pub matrix: DMatrix<f64>,
    pub support: BlockSupport,
}

impl FdJacobian {
    /// `tr(X_I J)`: the divergence of `μ̂` implied by this Jacobian.
    pub fn divergence(&self, problem: &Problem) -> f64 {
        if self.support.is_empty() {
            return 0.0;
        }
        let x_i = self.support.columns(problem.design().matrix());
        x_i.transpose().component_mul(&self.matrix).sum()
    }
}

/// Central-difference Jacobian of `y ↦ β̂(y)_I` on the support at `y`.
/// Fails with [`Error::TransitionCrossing`] when a probe changes the support.
pub fn fd_jacobian(problem: &Problem, h: f64, opts: &SolverOptions) -> Result<FdJacobian> {
    check_step(h)?;
    let base = solve(problem, opts)?;
    let support = base.support;
    let q = problem.design().rows();
    let mut matrix = DMatrix::zeros(support.active_dim(), q);
    for i in 0..q {
        let probe = |delta: f64| -> Result<DVector<f64>> {
            let sol = solve(&perturbed(problem, i, delta)?, opts)?;
            if sol.support != support {
                return Err(Error::TransitionCrossing { coordinate: i });
            }
            Ok(support.restrict(sol.beta.values()))
        };
        let column = (probe(h)? - probe(-h)?) / (2.0 * h);
        matrix.set_column(i, &column);
    }
    Ok(FdJacobian { matrix, support })
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub replicates: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    pub thresholds: ProximityThresholds,
    pub parallel: bool,
    /// Drop replicates whose DOF report carries a transition warning.
    pub exclude_warned: bool,
}

impl McConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            solver: SolverOptions::default(),
            thresholds: ProximityThresholds::default(),
            parallel: true,
            exclude_warned: false,
        }
    }
}

/// Monte Carlo DOF and risk summary; every `*_stderr` is a sample standard
/// deviation over `sqrt(replicates)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDofResult {
    /// Replicates that entered the averages.
    pub replicates: usize,
    pub failures: usize,
    pub warned: usize,
    pub sigma: f64,
    pub lambda: f64,
    /// Stein form `mean_k Σ_i (y_i − μ₀_i) μ̂_i / σ²`.
    pub mc_dof: f64,
    pub mc_stderr: f64,
    /// Sample-covariance form `Σ_i côv(y_i, μ̂_i) / σ²`.
    pub cov_dof: f64,
    pub cov_stderr: f64,
    pub mean_divergence: f64,
    pub div_stderr: f64,
    pub mean_sure: f64,
    /// Mean of the true loss `‖μ̂ − μ₀‖²`.
    pub mean_loss: f64,
    /// Standard error of the paired difference SURE − loss.
    pub sure_loss_stderr: f64,
}

impl McDofResult {
    pub fn combined_stderr(&self) -> f64 {
        self.mc_stderr.hypot(self.div_stderr)
    }

    /// `|mean divergence − Stein MC DOF| ≤ k · combined stderr`.
    pub fn divergence_unbiased(&self, k: f64) -> bool {
        (self.mean_divergence - self.mc_dof).abs() <= k * self.combined_stderr()
    }

    /// The two Monte Carlo DOF estimators agree within `k` combined standard errors.
    pub fn estimators_agree(&self, k: f64) -> bool {
        (self.mc_dof - self.cov_dof).abs() <= k * self.mc_stderr.hypot(self.cov_stderr)
    }

    /// `|mean SURE − mean loss| ≤ k · stderr` of the paired difference.
    pub fn sure_unbiased(&self, k: f64) -> bool {
        (self.mean_sure - self.mean_loss).abs() <= k * self.sure_loss_stderr
    }
}

/// `ratio · max_b ‖X_b^T μ₀‖`.
pub fn lambda_from_mu0(scenario: &Scenario, ratio: f64) -> f64 {
    ratio * lambda_max(&scenario.design, &scenario.partition, &scenario.mu0)
}

struct Replicate {
    y: DVector<f64>,
    mu_hat: DVector<f64>,
    divergence: f64,
    warning: bool,
}

/// Draws `y_k = μ₀ + σ z_k` for `k < replicates` from stream `k` of `seed`,
/// solves each from a cold start and compares the averaged divergence with
/// the Monte Carlo DOF. Concurrent and sequential runs give identical results.
pub fn mc_dof(scenario: &Scenario, lambda: f64, config: &McConfig) -> Result<McDofResult> {
    if config.replicates < 2 {
        return Err(Error::InvalidParameter("need at least 2 replicates".into()));
    }
    if !(scenario.sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    let mut solver = config.solver.clone();
    solver.warm_start = None;
    let run = |k: usize| -> Result<Replicate> {
        let y = scenario.observe(config.seed, k as u64);
        let problem = scenario.problem(y.clone(), lambda)?;
        let solution = solve(&problem, &solver)?;
        let report = dof_estimate_with(&problem, &solution, &config.thresholds)?;
        Ok(Replicate {
            mu_hat: solution.fitted(&problem),
            y,
            divergence: report.divergence,
            warning: report.warning,
        })
    };
    let outcomes: Vec<Result<Replicate>> = if config.parallel {
        (0..config.replicates).into_par_iter().map(run).collect()
    } else {
        (0..config.replicates).map(run).collect()
    };

    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let ok: Vec<Replicate> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let warned = ok.iter().filter(|r| r.warning).count();
    let used: Vec<&Replicate> = ok
        .iter()
        .filter(|r| !(config.exclude_warned && r.warning))
        .collect();
    let n = used.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "only {n} usable replicates ({failures} failed, {warned} warned)"
        )));
    }

    let sigma = scenario.sigma;
    let var = sigma * sigma;
    let q = scenario.mu0.len();
    let mu0 = &scenario.mu0;

    let stein: Vec<f64> = used.iter().map(|r| (&r.y - mu0).dot(&r.mu_hat) / var).collect();
    let divs: Vec<f64> = used.iter().map(|r| r.divergence).collect();

    let y_bar = mean_vector(used.iter().map(|r| &r.y), q);
    let mu_bar = mean_vector(used.iter().map(|r| &r.mu_hat), q);
    let cov_terms: Vec<f64> = used
        .iter()
        .map(|r| (&r.y - &y_bar).dot(&(&r.mu_hat - &mu_bar)) / var)
        .collect();
    let nf = n as f64;
    let cov_dof = cov_terms.iter().sum::<f64>() / (nf - 1.0);
    let cov_stderr = std_dev(&cov_terms) / nf.sqrt() * nf / (nf - 1.0);

    let sure: Vec<f64> = used
        .iter()
        .map(|r| (&r.y - &r.mu_hat).norm_squared() - q as f64 * var + 2.0 * var * r.divergence)
        .collect();
    let loss: Vec<f64> = used.iter().map(|r| (&r.mu_hat - mu0).norm_squared()).collect();
    let gap: Vec<f64> = sure.iter().zip(&loss).map(|(s, l)| s - l).collect();

    Ok(McDofResult {
        replicates: n,
        failures,
        warned,
        sigma,
        lambda,
        mc_dof: mean(&stein),
        mc_stderr: stderr(&stein),
        cov_dof,
        cov_stderr,
        mean_divergence: mean(&divs),
        div_stderr: stderr(&divs),
        mean_sure: mean(&sure),
        mean_loss: mean(&loss),
        sure_loss_stderr: stderr(&gap),
    })
}

fn mean_vector<'a>(vs: impl Iterator<Item = &'a DVector<f64>>, len: usize) -> DVector<f64> {
    let mut total = DVector::zeros(len);
    let mut count = 0usize;
    for v in vs {
        total += v;
        count += 1;
    }
    total / count as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn stderr(v: &[f64]) -> f64 {
    std_dev(v) / (v.len() as f64).sqrt()
}
