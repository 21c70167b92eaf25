use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gldof::blocks::BlockPartition;
use gldof::datagen::{generate, Scenario, ScenarioSpec};
use gldof::dof::{differential, dof_estimate, DofReport};
use gldof::problem_file::{problem_from_csv, ProblemFile};
use gldof::risk::{default_grid, estimate_sigma, fmt_sci, lambda_path, Criterion, PathOptions};
use gldof::solver::{lambda_max, solve, Problem, Solution, SolverOptions};
use gldof::validate::{
    default_fd_step, fd_jacobian, lambda_from_mu0, mc_dof, oracle_solver_options, McConfig,
    McDofResult,
};
use gldof::Error;
use nalgebra::DVector;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{
    Cli, Command, FdArgs, GenArgs, InputArgs, LambdaArgs, McArgs, PathArgs, SolveArgs,
    SolverArgs, SpecArgs, ValidateCommand,
};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    NumericalFailure,
    ValidationFailed,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::NumericalFailure => 3,
            Status::ValidationFailed => 4,
        }
    }
}

/// 3 for numerical failures of the core library, 2 for everything else
/// (bad flags, unreadable or malformed input, invalid parameters).
pub fn error_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match core {
        Some(
            Error::NotConverged { .. }
            | Error::Factorization(_)
            | Error::DegenerateBlock { .. }
            | Error::TransitionCrossing { .. }
            | Error::Generation(_),
        ) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    let stamp = !cli.no_timestamp;
    match cli.command {
        Command::Gen(args) => gen(args, RunManifest::new("gen", stamp)),
        Command::Solve(args) => solve_cmd(args, RunManifest::new("solve", stamp)),
        Command::Dof(args) => dof_cmd(args, RunManifest::new("dof", stamp)),
        Command::Path(args) => path_cmd(args, RunManifest::new("path", stamp)),
        Command::Validate(ValidateCommand::Fd(args)) => {
            fd_cmd(args, RunManifest::new("validate fd", stamp))
        }
        Command::Validate(ValidateCommand::Mc(args)) => {
            mc_cmd(args, RunManifest::new("validate mc", stamp))
        }
    }
}

fn to_json(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    text
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn parse_blocks(text: &str) -> Result<BlockPartition> {
    let text = text.trim();
    if text.starts_with('[') {
        return Ok(BlockPartition::from_json(text)?);
    }
    let sizes = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("bad block sizes {text:?}"))?;
    Ok(BlockPartition::contiguous(&sizes)?)
}

fn load_problem(input: &InputArgs, m: &mut RunManifest) -> Result<ProblemFile> {
    if let Some(path) = &input.problem {
        let text = m.read_input(path)?;
        m.option("problem", path);
        return ProblemFile::from_json(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let (Some(x), Some(y), Some(blocks)) = (&input.x_csv, &input.y_csv, &input.blocks) else {
        bail!("need --problem or all of --x-csv, --y-csv and --blocks");
    };
    let x_text = m.read_input(x)?;
    let y_text = m.read_input(y)?;
    m.option("x_csv", x);
    m.option("y_csv", y);
    m.option("blocks", blocks);
    Ok(problem_from_csv(&x_text, &y_text, parse_blocks(blocks)?, None)?)
}

fn resolve_problem(file: &ProblemFile, lambda: &LambdaArgs, m: &mut RunManifest) -> Result<Problem> {
    let problem = match lambda.lambda_ratio {
        Some(ratio) => {
            if !(ratio > 0.0) {
                bail!("--lambda-ratio must be positive, got {ratio}");
            }
            let (design, partition, y) = file.parts()?;
            let lambda = ratio * lambda_max(&design, &partition, &y);
            m.option("lambda_ratio", ratio);
            Problem::new(design, partition, y, lambda)?
        }
        None => file.problem(lambda.lambda)?,
    };
    m.option("lambda", problem.lambda());
    Ok(problem)
}

fn solver_options(args: &SolverArgs, m: &mut RunManifest) -> SolverOptions {
    m.option("tol", args.tol);
    m.option("max_iter", args.max_iter);
    SolverOptions {
        kkt_tol: args.tol,
        max_iter: args.max_iter,
        ..SolverOptions::default()
    }
}

fn read_warm_start(path: &Path, m: &mut RunManifest) -> Result<DVector<f64>> {
    let text = m.read_input(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let values = value.get("beta").unwrap_or(&value);
    let beta: Vec<f64> = serde_json::from_value(values.clone())
        .with_context(|| format!("{} holds no coefficient array", path.display()))?;
    m.option("warm_start", path);
    Ok(DVector::from_vec(beta))
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(f))
}

fn resolve_spec(args: &SpecArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<ScenarioSpec> {
    let spec = match &args.spec {
        Some(path) => {
            let text = m.read_input(path)?;
            let mut spec: ScenarioSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            spec
        }
        None => ScenarioSpec {
            q: args.q.ok_or_else(|| anyhow!("--q is required without --spec"))?,
            n: args.block_sizes.iter().sum(),
            block_sizes: args.block_sizes.clone(),
            k_active: args.k_active,
            signal_scale: args.signal_scale,
            sigma: args.sigma,
            seed: seed.ok_or_else(|| anyhow!("a scenario seed is required without --spec"))?,
            identity: args.identity,
        },
    };
    spec.validate()?;
    m.option("spec", &spec);
    m.seed("scenario", spec.seed);
    Ok(spec)
}

fn gen(args: GenArgs, mut m: RunManifest) -> Result<Status> {
    let spec = resolve_spec(&args.spec, args.seed, &mut m)?;
    if args.stream == u64::MAX {
        bail!("stream {} is reserved for the design", u64::MAX);
    }
    let scenario = generate(&spec)?;
    let y = scenario.observe(spec.seed, args.stream);
    m.option("stream", args.stream);
    let lambda = match (args.lambda, args.lambda_ratio) {
        (Some(l), _) => Some(l),
        (None, Some(r)) => {
            m.option("lambda_ratio", r);
            Some(r * lambda_max(&scenario.design, &scenario.partition, &y))
        }
        (None, None) => None,
    };
    if let Some(l) = lambda {
        if !(l > 0.0 && l.is_finite()) {
            bail!("lambda must be positive, got {l}");
        }
        m.option("lambda", l);
    }
    let mut file = ProblemFile::from_scenario(&scenario, &y, lambda);
    file.manifest = Some(serde_json::to_value(&m)?);
    write_output(args.out.as_deref(), &to_json(&file))?;
    Ok(Status::Success)
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    manifest: &'a RunManifest,
    lambda: f64,
    lambda_max: f64,
    converged: bool,
    kkt_tol: f64,
    kkt_residual: f64,
    iterations: usize,
    objective: f64,
    active_blocks: &'a [usize],
    active_dim: usize,
    beta: &'a [f64],
}

fn solve_output<'a>(
    m: &'a RunManifest,
    problem: &Problem,
    solution: &'a Solution,
    kkt_tol: f64,
    converged: bool,
) -> SolveOutput<'a> {
    SolveOutput {
        manifest: m,
        lambda: problem.lambda(),
        lambda_max: problem.lambda_max(),
        converged,
        kkt_tol,
        kkt_residual: solution.kkt_residual,
        iterations: solution.iterations,
        objective: solution.objective,
        active_blocks: solution.support.active(),
        active_dim: solution.support.active_dim(),
        beta: solution.beta.values().as_slice(),
    }
}

fn solve_cmd(args: SolveArgs, mut m: RunManifest) -> Result<Status> {
    let file = load_problem(&args.input, &mut m)?;
    let problem = resolve_problem(&file, &args.lambda, &mut m)?;
    let mut opts = solver_options(&args.solver, &mut m);
    if let Some(path) = &args.warm_start {
        opts.warm_start = Some(read_warm_start(path, &mut m)?);
    }
    let (solution, converged) = match solve(&problem, &opts) {
        Ok(s) => (s, true),
        Err(Error::NotConverged { best, .. }) => (*best, false),
        Err(e) => return Err(e.into()),
    };
    let out = solve_output(&m, &problem, &solution, opts.kkt_tol, converged);
    write_output(args.out.as_deref(), &to_json(&out))?;
    if converged {
        Ok(Status::Success)
    } else {
        eprintln!(
            "solver stopped after {} iterations with kkt residual {} > {}",
            solution.iterations,
            fmt_sci(solution.kkt_residual),
            fmt_sci(opts.kkt_tol)
        );
        Ok(Status::NumericalFailure)
    }
}

#[derive(Serialize)]
struct DofOutput<'a> {
    manifest: &'a RunManifest,
    lambda: f64,
    lambda_max: f64,
    kkt_residual: f64,
    iterations: usize,
    residual_sq: f64,
    report: &'a DofReport,
}

fn dof_cmd(args: SolveArgs, mut m: RunManifest) -> Result<Status> {
    let file = load_problem(&args.input, &mut m)?;
    let problem = resolve_problem(&file, &args.lambda, &mut m)?;
    let mut opts = solver_options(&args.solver, &mut m);
    if let Some(path) = &args.warm_start {
        opts.warm_start = Some(read_warm_start(path, &mut m)?);
    }
    let solution = solve(&problem, &opts)?;
    let report = dof_estimate(&problem, &solution)?;
    if report.warning {
        eprintln!(
            "warning: y is close to a transition point (margins {} and {})",
            fmt_sci(report.transition_margin),
            fmt_sci(report.support_margin)
        );
    }
    let out = DofOutput {
        manifest: &m,
        lambda: problem.lambda(),
        lambda_max: problem.lambda_max(),
        kkt_residual: solution.kkt_residual,
        iterations: solution.iterations,
        residual_sq: (problem.y() - solution.fitted(&problem)).norm_squared(),
        report: &report,
    };
    write_output(args.out.as_deref(), &to_json(&out))?;
    Ok(Status::Success)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = OsString::from(out.as_os_str());
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn path_cmd(args: PathArgs, mut m: RunManifest) -> Result<Status> {
    let file = load_problem(&args.input, &mut m)?;
    let (design, partition, y) = file.parts()?;
    let grid = if args.grid.is_empty() {
        if args.grid_points == 0 {
            bail!("--grid-points must be positive");
        }
        if !(args.grid_decades >= 0.0 && args.grid_decades.is_finite()) {
            bail!("--grid-decades must be nonnegative, got {}", args.grid_decades);
        }
        m.option("grid_points", args.grid_points);
        m.option("grid_decades", args.grid_decades);
        default_grid(lambda_max(&design, &partition, &y), args.grid_points, args.grid_decades)
    } else {
        m.option("grid", &args.grid);
        args.grid.clone()
    };
    let (sigma, source) = if let Some(s) = args.sigma {
        (Some(s), "flag")
    } else if args.estimate_sigma {
        (Some(estimate_sigma(&design, &y)?), "least_squares")
    } else if let Some(s) = file.sigma {
        (Some(s), "problem_file")
    } else {
        (None, "none")
    };
    m.option("sigma", sigma);
    m.option("sigma_source", source);
    m.option("jobs", args.jobs);
    m.option("path_mode", if args.jobs == 1 { "warm_sequential" } else { "cold_parallel" });
    let opts = PathOptions {
        sigma,
        solver: solver_options(&args.solver, &mut m),
        parallel: args.jobs != 1,
        ..PathOptions::default()
    };
    let curve = with_pool(args.jobs, || lambda_path(&design, &partition, &y, &grid, &opts))??;

    write_output(args.out.as_deref(), &curve.to_csv_string())?;
    if let Some(out) = &args.out {
        let sidecar = sidecar_path(out);
        std::fs::write(&sidecar, to_json(&m))
            .with_context(|| format!("writing {}", sidecar.display()))?;
    }
    for (name, c) in [
        ("sure", Criterion::Sure),
        ("gcv", Criterion::Gcv),
        ("cp", Criterion::Cp),
        ("aic", Criterion::Aic),
    ] {
        if let Some(k) = curve.select(c) {
            eprintln!("{name}: lambda {}", fmt_sci(curve.records[k].lambda));
        }
    }
    let failed: Vec<_> = curve.records.iter().filter(|r| r.failure.is_some()).collect();
    for r in &failed {
        eprintln!(
            "failed at lambda {}: {}",
            fmt_sci(r.lambda),
            r.failure.as_deref().unwrap_or_default()
        );
    }
    Ok(if failed.is_empty() {
        Status::Success
    } else {
        Status::NumericalFailure
    })
}

#[derive(Serialize)]
struct FdOutput<'a> {
    manifest: &'a RunManifest,
    lambda: f64,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
    active_blocks: &'a [usize],
    divergence: f64,
    fd_divergence: f64,
    /// Largest `|closed form − difference| / max(rel_tol·|difference|, abs_floor)` over entries.
    worst_entry_ratio: f64,
    divergence_ratio: f64,
    warning: bool,
    pass: bool,
}

fn fd_cmd(args: FdArgs, mut m: RunManifest) -> Result<Status> {
    let file = load_problem(&args.input, &mut m)?;
    let problem = resolve_problem(&file, &args.lambda, &mut m)?;
    let opts = oracle_solver_options();
    m.option("oracle_tol", opts.kkt_tol);
    let h = args.step.unwrap_or_else(|| default_fd_step(problem.y()));
    m.option("step", h);
    m.option("rel_tol", args.rel_tol);
    m.option("abs_floor", args.abs_floor);

    let solution = solve(&problem, &opts)?;
    let d = differential(&problem, &solution)?;
    let report = dof_estimate(&problem, &solution)?;
    let fd = fd_jacobian(&problem, h, &opts)?;
    if fd.support != d.support {
        return Err(Error::TransitionCrossing { coordinate: 0 }.into());
    }
    let ratio = |a: f64, b: f64| (a - b).abs() / (args.rel_tol * b.abs()).max(args.abs_floor);
    let worst_entry = d
        .matrix
        .iter()
        .zip(fd.matrix.iter())
        .map(|(a, b)| ratio(*a, *b))
        .fold(0.0, f64::max);
    let fd_divergence = fd.divergence(&problem);
    let divergence_ratio = ratio(report.divergence, fd_divergence);
    let pass = worst_entry <= 1.0 && divergence_ratio <= 1.0;

    let out = FdOutput {
        manifest: &m,
        lambda: problem.lambda(),
        step: h,
        rel_tol: args.rel_tol,
        abs_floor: args.abs_floor,
        active_blocks: d.support.active(),
        divergence: report.divergence,
        fd_divergence,
        worst_entry_ratio: worst_entry,
        divergence_ratio,
        warning: report.warning,
        pass,
    };
    write_output(args.out.as_deref(), &to_json(&out))?;
    eprintln!(
        "{}: divergence {} vs finite differences {}, worst entry error {} of tolerance",
        if pass { "PASS" } else { "FAIL" },
        fmt_sci(report.divergence),
        fmt_sci(fd_divergence),
        fmt_sci(worst_entry)
    );
    Ok(if pass {
        Status::Success
    } else {
        Status::ValidationFailed
    })
}

#[derive(Serialize)]
struct McChecks {
    divergence_unbiased: bool,
    estimators_agree: bool,
    sure_unbiased: bool,
}

#[derive(Serialize)]
struct McOutput<'a> {
    manifest: &'a RunManifest,
    scenario: &'a ScenarioSpec,
    result: &'a McDofResult,
    checks: McChecks,
    pass: bool,
}

fn mc_lambda(args: &McArgs, scenario: &Scenario, m: &mut RunManifest) -> f64 {
    let lambda = match args.lambda {
        Some(l) => l,
        None => {
            m.option("lambda_ratio", args.lambda_ratio);
            lambda_from_mu0(scenario, args.lambda_ratio)
        }
    };
    m.option("lambda", lambda);
    lambda
}

fn mc_cmd(args: McArgs, mut m: RunManifest) -> Result<Status> {
    let scenario_seed = if args.spec.spec.is_some() {
        args.scenario_seed
    } else {
        Some(args.scenario_seed.unwrap_or(args.seed))
    };
    let spec = resolve_spec(&args.spec, scenario_seed, &mut m)?;
    let scenario = generate(&spec)?;
    let lambda = mc_lambda(&args, &scenario, &mut m);
    m.seed("monte_carlo", args.seed);
    m.option("replicates", args.replicates);
    m.option("exclude_warned", args.exclude_warned);
    m.option("jobs", args.jobs);
    let config = McConfig {
        solver: solver_options(&args.solver, &mut m),
        parallel: args.jobs != 1,
        exclude_warned: args.exclude_warned,
        ..McConfig::new(args.replicates, args.seed)
    };
    let result = with_pool(args.jobs, || mc_dof(&scenario, lambda, &config))??;

    let checks = McChecks {
        divergence_unbiased: result.divergence_unbiased(3.0),
        estimators_agree: result.estimators_agree(3.0),
        sure_unbiased: result.sure_unbiased(3.0),
    };
    let pass = checks.divergence_unbiased && result.failures == 0;
    let out = McOutput {
        manifest: &m,
        scenario: &spec,
        result: &result,
        checks,
        pass,
    };
    write_output(args.out.as_deref(), &to_json(&out))?;
    eprintln!(
        "{}: mean divergence {} vs Monte Carlo DOF {} (3 x stderr {}), {} failures",
        if pass { "PASS" } else { "FAIL" },
        fmt_sci(result.mean_divergence),
        fmt_sci(result.mc_dof),
        fmt_sci(3.0 * result.combined_stderr()),
        result.failures
    );
    Ok(if pass {
        Status::Success
    } else {
        Status::ValidationFailed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_from_sizes_or_json() {
        assert_eq!(parse_blocks("2, 1").unwrap(), BlockPartition::contiguous(&[2, 1]).unwrap());
        let p = parse_blocks("[[0,2],[1]]").unwrap();
        assert_eq!(p.blocks(), &[vec![0, 2], vec![1]]);
        assert!(parse_blocks("2,x").is_err());
    }

    #[test]
    fn sidecar_next_to_output() {
        assert_eq!(sidecar_path(Path::new("out/path.csv")), PathBuf::from("out/path.csv.manifest.json"));
    }

    #[test]
    fn error_codes() {
        let numerical = anyhow::Error::from(Error::Factorization("x".into())).context("dof");
        assert_eq!(error_code(&numerical), 3);
        let usage = anyhow::Error::from(Error::InvalidParameter("x".into()));
        assert_eq!(error_code(&usage), 2);
        assert_eq!(error_code(&anyhow!("missing flag")), 2);
    }
}
