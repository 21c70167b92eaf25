//! `gldof`: group Lasso solver with degrees-of-freedom and risk estimates.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
//! 4 validation check failed.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gldof", version, about = "Group Lasso degrees of freedom and risk estimation")]
pub struct Cli {
    /// Leave the wall-clock timestamp out of the run manifest.
    #[arg(long, global = true)]
    pub no_timestamp: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic problem file.
    Gen(GenArgs),
    /// Solve the group Lasso at one λ.
    Solve(SolveArgs),
    /// Solve and report the divergence (degrees of freedom) estimate.
    Dof(SolveArgs),
    /// Risk criteria along a λ grid, as CSV.
    Path(PathArgs),
    /// Finite-difference and Monte Carlo checks.
    #[command(subcommand)]
    Validate(ValidateCommand),
}

#[derive(Subcommand, Debug)]
pub enum ValidateCommand {
    /// Compare the closed-form differential with central differences.
    Fd(FdArgs),
    /// Monte Carlo check that the divergence is unbiased for the DOF.
    Mc(McArgs),
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Problem file (JSON).
    #[arg(long, required_unless_present = "x_csv", conflicts_with = "x_csv")]
    pub problem: Option<PathBuf>,
    /// Design matrix as CSV, one row per observation.
    #[arg(long, requires_all = ["y_csv", "blocks"])]
    pub x_csv: Option<PathBuf>,
    /// Response vector as CSV.
    #[arg(long, requires = "x_csv")]
    pub y_csv: Option<PathBuf>,
    /// Blocks for CSV input: sizes "3,3,2" or a JSON partition "[[0,1],[2]]".
    #[arg(long, requires = "x_csv")]
    pub blocks: Option<String>,
}

#[derive(Args, Debug)]
pub struct SolverArgs {
    /// Absolute KKT tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct LambdaArgs {
    /// Regularization level; defaults to the value in the problem file.
    #[arg(long, conflicts_with = "lambda_ratio")]
    pub lambda: Option<f64>,
    /// λ as a fraction of λ_max(y).
    #[arg(long)]
    pub lambda_ratio: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub lambda: LambdaArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Initial coefficients: a JSON array or a previous solve output.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PathArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Explicit λ values, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["grid_points", "grid_decades"])]
    pub grid: Vec<f64>,
    /// Log-spaced grid below λ_max(y).
    #[arg(long, default_value_t = 50)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 2.0)]
    pub grid_decades: f64,
    /// Noise level; defaults to the problem file's sigma.
    #[arg(long, conflicts_with = "estimate_sigma")]
    pub sigma: Option<f64>,
    /// Use the least-squares residual estimate of sigma.
    #[arg(long)]
    pub estimate_sigma: bool,
    /// Worker threads; 1 runs the warm-started sequential path, 0 uses all cores.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// CSV output; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FdArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub lambda: LambdaArgs,
    /// Difference step; defaults to 1e-5·max(1, ‖y‖∞).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub abs_floor: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpecArgs {
    /// Scenario as JSON (`Q`, `N`, `block_sizes`, `k_active`, `sigma`, `seed`, ...).
    #[arg(
        long,
        conflicts_with_all = ["q", "block_sizes", "k_active", "signal_scale", "sigma", "identity"]
    )]
    pub spec: Option<PathBuf>,
    /// Number of observations.
    #[arg(long, required_unless_present = "spec")]
    pub q: Option<usize>,
    /// Block sizes, comma separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "spec")]
    pub block_sizes: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub k_active: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal_scale: f64,
    /// Noise level of the scenario.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Identity design (requires Q equal to the total block size).
    #[arg(long)]
    pub identity: bool,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Scenario seed; overrides the seed of a spec file.
    #[arg(long, env = "GLDOF_SEED")]
    pub seed: Option<u64>,
    /// Observation stream of the scenario seed used for y.
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    /// Store λ in the file.
    #[arg(long, conflicts_with = "lambda_ratio")]
    pub lambda: Option<f64>,
    /// Store λ = ratio·λ_max(y) in the file.
    #[arg(long)]
    pub lambda_ratio: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct McArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Scenario seed when the scenario is given by flags; defaults to --seed.
    #[arg(long)]
    pub scenario_seed: Option<u64>,
    /// Monte Carlo seed.
    #[arg(long, env = "GLDOF_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    #[arg(long, conflicts_with = "lambda_ratio")]
    pub lambda: Option<f64>,
    /// λ as a fraction of λ_max(μ₀).
    #[arg(long, default_value_t = 0.5)]
    pub lambda_ratio: f64,
    /// Drop replicates that carry a transition warning.
    #[arg(long)]
    pub exclude_warned: bool,
    /// Worker threads, 0 uses all cores; results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(status) => ExitCode::from(status.code()),
        Err(err) => {
            let code = commands::error_code(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
