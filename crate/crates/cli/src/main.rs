//! `causal-flow`: causal discovery, interventions and counterfactuals with
//! affine autoregressive flows.
//!
//! Exit codes: 0 success, 1 bad input or usage, 2 training divergence,
//! 3 undecided direction, 4 unsupported intervention target.

mod commands;
mod manifest;
mod queries;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_flow::diffnet::Activation;
use causal_flow::flow::BaseDistribution;
use causal_flow::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "causal-flow",
    version,
    about = "Causal discovery and inference with affine autoregressive flows"
)]
struct Cli {
    /// Directory receiving result files and manifest.json.
    #[arg(long, global = true, default_value = "causal-flow-out")]
    out: PathBuf,

    /// Worker threads for repetitions and pairs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[arg(long, global = true, env = "CAUSAL_FLOW_SEED", default_value_t = 0)]
    seed: u64,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decide the causal direction between two columns of a CSV file.
    Discover(commands::DiscoverArgs),
    /// Generate a synthetic data set with known causal structure.
    Simulate(commands::SimulateArgs),
    /// Direction accuracy on synthetic pairs over a grid of sample sizes.
    SimBench(commands::SimBenchArgs),
    /// Direction accuracy on a cause-effect pairs collection.
    Pairs(commands::PairsArgs),
    /// Fit a flow to a CSV file and save it as JSON.
    Fit(commands::FitArgs),
    /// Sample from the interventional distribution of a saved flow.
    Intervene(queries::InterveneArgs),
    /// Counterfactual predictions for one observation under a saved flow.
    Counterfactual(queries::CounterfactualArgs),
    /// Check gradients, invertibility and normalization of the numeric core.
    Selftest(selftest::SelftestArgs),
}

/// Training options shared by commands that fit flows. Flags override the
/// JSON config file, which overrides the defaults.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    flow_layers: Option<usize>,
    /// Comma-separated hidden layer widths of each conditioner.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    base: Option<BaseDistribution>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        cfg.seed = seed;
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.flow_layers {
            cfg.flow_layers = v;
        }
        if let Some(v) = &self.hidden {
            cfg.hidden = v.clone();
        }
        if let Some(v) = self.activation {
            cfg.activation = v;
        }
        if let Some(v) = self.base {
            cfg.base = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if self.batch_size.is_some() {
            cfg.batch_size = self.batch_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Shared context handed to every command.
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] causal_flow::Error),
    #[error("{0}")]
    Usage(String),
    #[error("direction undecided")]
    Undecided,
    #[error("self-test failed")]
    SelftestFailed,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use causal_flow::Error as E;
        match self {
            CliError::Usage(_) | CliError::SelftestFailed => 1,
            CliError::Undecided => 3,
            CliError::Core(e) => match e {
                E::TrainingDiverged { .. }
                | E::NonFinite { .. }
                | E::NonFiniteGradient { .. }
                | E::NonFiniteLoss => 2,
                E::UnsupportedIntervention { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            log::warn!("could not configure thread pool: {e}");
        }
    }
    let ctx = Context {
        out: cli.out,
        seed: cli.seed,
    };
    let res = match &cli.command {
        Command::Discover(a) => commands::discover(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::SimBench(a) => commands::sim_bench(&ctx, a),
        Command::Pairs(a) => commands::pairs(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Intervene(a) => queries::intervene(&ctx, a),
        Command::Counterfactual(a) => queries::counterfactual(&ctx, a),
        Command::Selftest(a) => selftest::run(&ctx, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Undecided | CliError::SelftestFailed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
