//! `continuity`: generate trajectories, train models, and run convergence
//! tests from the command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::output::{exit_code_for, Outcome};

#[derive(Debug, Parser)]
#[command(name = "continuity", version, about)]
struct Cli {
    /// Experiment config JSON; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling and training; falls back to the config, then
    /// CONTINUITY_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the step-size sweep and training batches.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample reference trajectories of a known system.
    Generate(GenerateArgs),
    /// Train an ODE-Net on trajectory files.
    Train(TrainArgs),
    /// Run the convergence test on a model.
    Test(TestArgs),
    /// Raise the training order until the model passes the test.
    Discover(DiscoverArgs),
    /// Fit a sparse polynomial model.
    Sindy(SindyArgs),
    /// Write the analytic error curve of the scalar linear problem.
    Theory(TheoryArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// harmonic, pendulum, lotka-volterra or cartesian-pendulum.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Per-sample jitter as a fraction of dt.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub skip_prob: Option<f64>,
    /// Initial condition as comma-separated values; repeat for several.
    #[arg(long = "ic", value_delimiter = ';', allow_hyphen_values = true)]
    pub ics: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// euler, midpoint or rk4.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// linear or shallow.
    #[arg(long)]
    pub model: Option<String>,
    /// Hidden width of the shallow model.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TestFlags {
    /// Grid half-width: h ranges over 1.1^i dt for |i| <= m.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// endpoint, max or mean.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trajectory CSV files.
    #[arg(long = "data", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "model", required = true, multiple = false)]
pub struct ModelSource {
    #[arg(long, group = "model")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, group = "model")]
    pub sindy_model: Option<PathBuf>,
    /// Test the true field of the named system instead of a model.
    #[arg(long, group = "model")]
    pub exact_field: Option<String>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Regularly sampled validation CSV files.
    #[arg(long = "val", required = true, num_args = 1..)]
    pub val: Vec<PathBuf>,
    /// Integration scheme; defaults to the checkpoint's training scheme.
    #[arg(long)]
    pub scheme: Option<String>,
    #[command(flatten)]
    pub test: TestFlags,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[arg(long = "data", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long = "val", required = true, num_args = 1..)]
    pub val: Vec<PathBuf>,
    /// Highest scheme order to try: 1, 2 or 4.
    #[arg(long)]
    pub quit_order: Option<u32>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub test: TestFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SindyArgs {
    #[arg(long = "data", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Maximum monomial degree.
    #[arg(long)]
    pub degree: Option<u32>,
    /// Finite-difference order: 1, 2 or 4.
    #[arg(long)]
    pub fd_order: Option<u32>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Model JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Order of the training scheme.
    #[arg(long)]
    pub p: Option<u32>,
    /// Order of the testing scheme.
    #[arg(long)]
    pub q: Option<u32>,
    /// Perturbation of the optimal parameter.
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Log-spaced grid instead of the test grid; needs --h-max and --n-h.
    #[arg(long, requires_all = ["h_max", "n_h"])]
    pub h_min: Option<f64>,
    #[arg(long, requires = "h_min")]
    pub h_max: Option<f64>,
    #[arg(long, requires = "h_min")]
    pub n_h: Option<usize>,
    /// Curve CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(cli, argv) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<Outcome> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(output::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    let mut cfg = match config::ExperimentConfig::load_or_default(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => return Err(output::usage(format!("{e:#}"))),
    };
    let seed = cfg
        .resolve_seed(cli.seed)
        .map_err(|e| output::usage(format!("{e:#}")))?;
    let ctx = commands::Context {
        argv,
        config_path: cli.config,
        seed: seed.unwrap_or(0),
        force: cli.force,
    };
    match cli.command {
        Command::Generate(a) => commands::generate(&ctx, cfg, a),
        Command::Train(a) => commands::train(&ctx, cfg, a),
        Command::Test(a) => commands::test(&ctx, cfg, a),
        Command::Discover(a) => commands::discover(&ctx, cfg, a),
        Command::Sindy(a) => commands::sindy(&ctx, cfg, a),
        Command::Theory(a) => commands::theory(&ctx, cfg, a),
    }
}
