//! Risk criteria built from the residual and the degrees-of-freedom estimate,
//! and a λ-path driver that evaluates them on a grid.
//!
//! With known noise level σ and `Q` observations:
//!
//! ```text
//! SURE = ‖y − μ̂‖² − Qσ² + 2σ² dof
//! GCV  = (‖y − μ̂‖²/Q) / (1 − dof/Q)²
//! Cp   = ‖y − μ̂‖²/σ² − Q + 2 dof
//! AIC  = ‖y − μ̂‖²/σ² + 2 dof
//! ```

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockPartition, Design};
use crate::dof::{dof_estimate_with, ProximityThresholds};
use crate::error::{Error, Result};
use crate::solver::{solve, Problem, SolverOptions};

pub fn sure(residual_sq: f64, dof: f64, sigma: f64, q: usize) -> f64 {
    let var = sigma * sigma;
    residual_sq - q as f64 * var + 2.0 * var * dof
}

pub fn gcv(residual_sq: f64, dof: f64, q: usize) -> Result<f64> {
    let q = q as f64;
    if dof >= q {
        return Err(Error::InvalidParameter(format!(
            "GCV undefined for dof {dof} >= Q {q}"
        )));
    }
    Ok((residual_sq / q) / (1.0 - dof / q).powi(2))
}

pub fn cp(residual_sq: f64, dof: f64, sigma: f64, q: usize) -> f64 {
    residual_sq / (sigma * sigma) - q as f64 + 2.0 * dof
}

pub fn aic(residual_sq: f64, dof: f64, sigma: f64, _q: usize) -> f64 {
    residual_sq / (sigma * sigma) + 2.0 * dof
}

/// `σ̂² = ‖y − X(X^TX)^{-1}X^Ty‖² / (Q − N)`, the unbiased least-squares estimate.
pub fn estimate_sigma(design: &Design, y: &DVector<f64>) -> Result<f64> {
    let (q, n) = (design.rows(), design.cols());
    if q <= n {
        return Err(Error::InvalidParameter(format!(
            "noise estimate needs Q > N (got Q = {q}, N = {n})"
        )));
    }
    let chol = design
        .gram()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("Gram matrix is not positive definite".into()))?;
    let coef = chol.solve(&design.matrix().tr_mul(y));
    let resid = y - design.matrix() * coef;
    Ok((resid.norm_squared() / (q - n) as f64).sqrt())
}

/// `points` log-spaced values from `lambda_max` down to `lambda_max / 10^decades`.
pub fn default_grid(lambda_max: f64, points: usize, decades: f64) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lambda_max],
        _ => (0..points)
            .map(|k| lambda_max * 10f64.powf(-decades * k as f64 / (points - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Sure,
    Gcv,
    Cp,
    Aic,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskRecord {
    pub lambda: f64,
    pub dof: f64,
    pub residual_sq: f64,
    pub sure: f64,
    pub gcv: f64,
    pub cp: f64,
    pub aic: f64,
    pub active_dim: usize,
    pub warning: bool,
    /// Solver or DOF failure at this λ; numeric fields are NaN when set.
    pub failure: Option<String>,
}

impl RiskRecord {
    fn failed(lambda: f64, err: &Error) -> Self {
        Self {
            lambda,
            dof: f64::NAN,
            residual_sq: f64::NAN,
            sure: f64::NAN,
            gcv: f64::NAN,
            cp: f64::NAN,
            aic: f64::NAN,
            active_dim: 0,
            warning: true,
            failure: Some(err.to_string()),
        }
    }

    pub fn criterion(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Sure => self.sure,
            Criterion::Gcv => self.gcv,
            Criterion::Cp => self.cp,
            Criterion::Aic => self.aic,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskCurve {
    pub sigma: Option<f64>,
    pub q: usize,
    /// One record per λ, in strictly decreasing λ order.
    pub records: Vec<RiskRecord>,
}

pub const CSV_HEADER: &str = "lambda,dof,residual_sq,sure,gcv,cp,aic,active_dim,warning";

impl RiskCurve {
    pub fn lambdas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }

    /// Index of the grid minimizer of `criterion`; ties go to the larger λ.
    pub fn select(&self, criterion: Criterion) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, rec) in self.records.iter().enumerate() {
            let v = rec.criterion(criterion);
            if v.is_nan() {
                continue;
            }
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k)
    }

    /// CSV with 17 significant digits and LF line endings.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                fmt_sci(r.lambda),
                fmt_sci(r.dof),
                fmt_sci(r.residual_sq),
                fmt_sci(r.sure),
                fmt_sci(r.gcv),
                fmt_sci(r.cp),
                fmt_sci(r.aic),
                r.active_dim,
                r.warning
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt_sci(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone)]
pub struct PathOptions {
    /// Known noise level; SURE, Cp and AIC are NaN without it.
    pub sigma: Option<f64>,
    pub solver: SolverOptions,
    pub thresholds: ProximityThresholds,
    /// Solve all λ concurrently from cold starts instead of warm-starting sequentially.
    pub parallel: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            sigma: None,
            solver: SolverOptions::default(),
            thresholds: ProximityThresholds::default(),
            parallel: false,
        }
    }
}

/// Solves and scores every λ of `grid` (sorted decreasing, duplicates removed).
pub fn lambda_path(
    design: &Arc<Design>,
    partition: &Arc<BlockPartition>,
    y: &DVector<f64>,
    grid: &[f64],
    opts: &PathOptions,
) -> Result<RiskCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty λ grid".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidParameter(format!("grid value {bad} is not positive")));
    }
    if let Some(s) = opts.sigma {
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {s}")));
        }
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    lambdas.dedup();

    let base = Problem::new(Arc::clone(design), Arc::clone(partition), y.clone(), lambdas[0])?;
    let records = if opts.parallel {
        lambdas
            .par_iter()
            .map(|&lambda| {
                let mut solver = opts.solver.clone();
                solver.warm_start = None;
                evaluate(&base, lambda, &solver, opts).0
            })
            .collect()
    } else {
        let mut solver = opts.solver.clone();
        lambdas
            .iter()
            .map(|&lambda| {
                let (rec, beta) = evaluate(&base, lambda, &solver, opts);
                if let Some(beta) = beta {
                    solver.warm_start = Some(beta);
                }
                rec
            })
            .collect()
    };
    Ok(RiskCurve {
        sigma: opts.sigma,
        q: design.rows(),
        records,
    })
}

fn evaluate(
    base: &Problem,
    lambda: f64,
    solver: &SolverOptions,
    opts: &PathOptions,
) -> (RiskRecord, Option<DVector<f64>>) {
    let run = || -> Result<(RiskRecord, DVector<f64>)> {
        let problem = base.with_lambda(lambda)?;
        let solution = solve(&problem, solver)?;
        let report = dof_estimate_with(&problem, &solution, &opts.thresholds)?;
        let q = problem.design().rows();
        let residual_sq = (problem.y() - solution.fitted(&problem)).norm_squared();
        let dof = report.divergence;
        let (s, c, a) = match opts.sigma {
            Some(sigma) => (
                sure(residual_sq, dof, sigma, q),
                cp(residual_sq, dof, sigma, q),
                aic(residual_sq, dof, sigma, q),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let record = RiskRecord {
            lambda,
            dof,
            residual_sq,
            sure: s,
            gcv: gcv(residual_sq, dof, q).unwrap_or(f64::NAN),
            cp: c,
            aic: a,
            active_dim: report.support.active_dim(),
            warning: report.warning,
            failure: None,
        };
        Ok((record, solution.beta.into_values()))
    };
    match run() {
        Ok((rec, beta)) => (rec, Some(beta)),
        Err(err) => (RiskRecord::failed(lambda, &err), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::solver::lambda_max;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(seed: u64) -> (Arc<Design>, Arc<BlockPartition>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(30, 12, |_, _| rng.random_range(-1.0..1.0));
        let beta0 = DVector::from_fn(12, |i, _| if i < 3 { 1.5 } else { 0.0 });
        let y = &x * beta0 + DVector::from_fn(30, |_, _| rng.random_range(-0.5..0.5));
        (
            Arc::new(Design::new(x).unwrap()),
            Arc::new(BlockPartition::contiguous(&[3, 3, 3, 3]).unwrap()),
            y,
        )
    }

    #[test]
    fn criteria_examples() {
        assert_eq!(sure(20.0 * 0.25, 0.0, 0.5, 20), 0.0);
        assert_eq!(sure(7.0, 0.0, 0.5, 20), 7.0 - 5.0);
        assert_eq!(gcv(3.0, 0.0, 20).unwrap(), 3.0 / 20.0);
        assert_eq!(gcv(0.0, 4.0, 20).unwrap(), 0.0);
        assert_relative_eq!(gcv(10.0, 4.0, 20).unwrap(), 0.78125, epsilon = 1e-15);
        assert!(gcv(1.0, 20.0, 20).is_err());
        assert_eq!(cp(20.0 * 0.25, 0.0, 0.5, 20), 0.0);
        assert_eq!(cp(7.0, 0.0, 0.5, 20), 7.0 / 0.25 - 20.0);
        assert_eq!(aic(7.0, 0.0, 0.5, 20), 28.0);
    }

    proptest! {
        #[test]
        fn criteria_identities(
            rss in 0.0f64..100.0, dof in 0.0f64..10.0, sigma in 0.05f64..5.0, q in 11usize..200
        ) {
            let s = sure(rss, dof, sigma, q);
            let c = cp(rss, dof, sigma, q);
            prop_assert!((s - sigma * sigma * c).abs() <= 1e-12 * (1.0 + s.abs()));
            prop_assert!((aic(rss, dof, sigma, q) - c - q as f64).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn grid_shape() {
        let g = default_grid(10.0, 50, 2.0);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 10.0);
        assert_relative_eq!(g[49], 0.1, max_relative = 1e-14);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_point_above_lambda_max() {
        let (d, p, y) = random_data(1);
        let lmax = lambda_max(&d, &p, &y);
        let opts = PathOptions {
            sigma: Some(0.3),
            ..PathOptions::default()
        };
        let curve = lambda_path(&d, &p, &y, &[2.0 * lmax], &opts).unwrap();
        assert_eq!(curve.records.len(), 1);
        let r = &curve.records[0];
        assert_eq!(r.dof, 0.0);
        assert_relative_eq!(r.residual_sq, y.norm_squared(), max_relative = 1e-14);
        assert_relative_eq!(r.sure, y.norm_squared() - 30.0 * 0.09, max_relative = 1e-12);
    }

    #[test]
    fn default_path_is_monotone() {
        let (d, p, y) = random_data(2);
        let grid = default_grid(lambda_max(&d, &p, &y), 50, 2.0);
        let curve = lambda_path(&d, &p, &y, &grid, &PathOptions::default()).unwrap();
        assert_eq!(curve.records.len(), 50);
        assert_eq!(curve.records[0].dof, 0.0);
        for w in curve.records.windows(2) {
            assert!(w[1].residual_sq <= w[0].residual_sq * (1.0 + 1e-9));
            if !w[0].warning && !w[1].warning {
                assert!(w[1].active_dim >= w[0].active_dim);
            }
        }
        assert!(curve.records.iter().all(|r| r.sure.is_nan() && r.gcv.is_finite()));
    }

    #[test]
    fn parallel_matches_sequential() {
        let (d, p, y) = random_data(3);
        let grid = default_grid(lambda_max(&d, &p, &y), 20, 2.0);
        let seq = lambda_path(&d, &p, &y, &grid, &PathOptions::default()).unwrap();
        let par_opts = PathOptions {
            parallel: true,
            ..PathOptions::default()
        };
        let par = lambda_path(&d, &p, &y, &grid, &par_opts).unwrap();
        for (a, b) in seq.records.iter().zip(&par.records) {
            assert_eq!(a.lambda, b.lambda);
            assert!((a.dof - b.dof).abs() < 1e-5);
            assert!((a.residual_sq - b.residual_sq).abs() < 1e-6 * (1.0 + a.residual_sq));
        }
    }

    #[test]
    fn sure_and_cp_select_same_lambda() {
        let (d, p, y) = random_data(4);
        let grid = default_grid(lambda_max(&d, &p, &y), 30, 2.0);
        let opts = PathOptions {
            sigma: Some(0.29),
            ..PathOptions::default()
        };
        let curve = lambda_path(&d, &p, &y, &grid, &opts).unwrap();
        assert_eq!(curve.select(Criterion::Sure), curve.select(Criterion::Cp));
        assert_eq!(curve.select(Criterion::Sure), curve.select(Criterion::Aic));
    }

    #[test]
    fn select_breaks_ties_toward_larger_lambda() {
        let mk = |lambda: f64, v: f64| RiskRecord {
            lambda,
            dof: 0.0,
            residual_sq: 0.0,
            sure: v,
            gcv: v,
            cp: v,
            aic: v,
            active_dim: 0,
            warning: false,
            failure: None,
        };
        let curve = RiskCurve {
            sigma: Some(1.0),
            q: 5,
            records: vec![mk(3.0, 2.0), mk(2.0, 1.0), mk(1.0, 1.0), mk(0.5, f64::NAN)],
        };
        assert_eq!(curve.select(Criterion::Sure), Some(1));
    }

    #[test]
    fn csv_format() {
        let (d, p, y) = random_data(5);
        let lmax = lambda_max(&d, &p, &y);
        let curve = lambda_path(&d, &p, &y, &[lmax * 0.5, lmax * 2.0], &PathOptions::default()).unwrap();
        let text = curve.to_csv_string();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 9);
        assert_eq!(first[0], format!("{:.16e}", lmax * 2.0));
        assert_eq!(first[0].parse::<f64>().unwrap(), lmax * 2.0);
        assert_eq!(first[3], "NaN");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn rejects_bad_grid() {
        let (d, p, y) = random_data(6);
        assert!(lambda_path(&d, &p, &y, &[], &PathOptions::default()).is_err());
        assert!(lambda_path(&d, &p, &y, &[1.0, -1.0], &PathOptions::default()).is_err());
    }

    #[test]
    fn sigma_estimate_is_reasonable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(400, 5, |_, _| rng.random_range(-1.0..1.0));
        let noise = DVector::from_fn(400, |_, _| rng.random_range(-1.0..1.0));
        let y = &x * DVector::from_element(5, 2.0) + &noise;
        let s = estimate_sigma(&Design::new(x).unwrap(), &y).unwrap();
        // uniform(-1,1) has σ = 1/√3
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 0.05);
        assert!(estimate_sigma(&Design::identity(3), &DVector::zeros(3)).is_err());
    }
}
