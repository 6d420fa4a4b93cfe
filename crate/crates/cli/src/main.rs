//! `dsg`: solve, train and simulate linear-quadratic deep structured games.


use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsg_core::{Error, Method, Population, StepSize};

/// Set under `--emit-json`, which reserves stdout for the JSON result.
static JSON_STDOUT: AtomicBool = AtomicBool::new(false);

/// Human-readable progress: stdout normally, stderr under `--emit-json`.
macro_rules! say {
    ($($t:tt)*) => {
        if crate::JSON_STDOUT.load(std::sync::atomic::Ordering::Relaxed) {
            eprintln!($($t)*);
        } else {
            println!($($t)*);
        }
    };
}

mod output;
mod tasks;

#[derive(Parser, Debug)]
#[command(name = "dsg", version, about = "Nash equilibria and policy optimization for LQ deep structured games")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Game and experiment file (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in game: example1, example2 or example3.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Also write result.json and print it on stdout.
    #[arg(long, global = true)]
    pub emit_json: bool,
    /// Write an SVG next to every plot-data CSV.
    #[arg(long, global = true)]
    pub svg: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the coupled Riccati equations for the Nash strategy.
    Solve(SolveArgs),
    /// Exact-gradient GD or NPGD.
    TrainMb(TrainArgs),
    /// Zeroth-order GD or NPGD from simulated costs.
    TrainMf {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        smoothing: SmoothingArgs,
    },
    /// Monte-Carlo rollouts of a strategy profile.
    Simulate(SimArgs),
    /// Nash strategy as the population grows.
    SweepN(SweepArgs),
    /// Run every diagnostic applicable to the game.
    Check(CheckArgs),
    /// Any of the above, chosen by --task.
    Run(RunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Solve,
    TrainMb,
    TrainMf,
    Simulate,
    SweepN,
    Check,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SolveArgs {
    /// Override the population size ("inf" for the mean-field limit).
    #[arg(long)]
    pub n: Option<Population>,
    #[arg(long, default_value_t = 1e-10)]
    pub solver_tol: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// gd or npg.
    #[arg(long, default_value = "gd", value_parser = parse_method)]
    pub method: Method,
    /// Step size, or "auto".
    #[arg(long, value_parser = parse_step)]
    pub eta: Option<StepSize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Stop once |J - J*| is below this (model-based only).
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Args, Debug, Clone)]
pub struct SmoothingArgs {
    /// Smoothing radius r.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Perturbations per gradient estimate (L).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Rollout horizon T.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub rollouts_per_perturbation: usize,
    /// Unperturbed rollouts per iteration (default max(L/10, 50)).
    #[arg(long)]
    pub baseline_rollouts: Option<usize>,
    /// Draw the learner uniformly each iteration.
    #[arg(long)]
    pub random_learner: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    #[arg(long, default_value_t = 4000)]
    pub rollouts: usize,
    #[arg(id = "sim_horizon", long = "sim-horizon", default_value_t = 200)]
    pub horizon: usize,
    /// Learner gains as comma-separated row-major entries (default: Nash).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta_bar: Option<Vec<f64>>,
    /// Learner index, 1-based.
    #[arg(long, default_value_t = 1)]
    pub learner: usize,
    /// Write the learner's lifted trajectory for every rollout.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    /// Population sizes, e.g. 2,5,10,inf.
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<Population>>,
}

#[derive(Args, Debug, Clone)]
pub struct CheckArgs {
    /// Rollouts for the simulation-based checks.
    #[arg(long, default_value_t = 4000)]
    pub check_rollouts: usize,
    #[arg(long, hide = true, allow_negative_numbers = true)]
    pub corrupt_gradient: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[command(flatten)]
    pub solve: SolveArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub sweep: SweepArgs,
    #[command(flatten)]
    pub check: CheckArgs,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_step(s: &str) -> Result<StepSize, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Why the run stopped; maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    ChecksFailed(usize),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) | Failure::ChecksFailed(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Dimension(_) | Error::NotSymmetric { .. } | Error::NotPsd { .. } | Error::Discount(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Numerical(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("output: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Config(format!("output: {e}"))
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("DSG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Config(format!("DSG_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    JSON_STDOUT.store(cli.global.emit_json, Ordering::Relaxed);
    match configure_threads().and_then(|_| tasks::dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(msg) => eprintln!("error: {msg}"),
                Failure::Numerical(msg) => eprintln!("numerical failure: {msg}"),
                Failure::ChecksFailed(k) => eprintln!("{k} check(s) failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
