use std::path::PathBuf;
use std::process::ExitCode;

use bayesamp::experiment::{Experiment, ExperimentConfig, Stage};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bayesamp",
    version,
    about = "Bayesian CNF amplification experiments on the gamma ring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing results.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Vib,
    Mcmc,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the training sets and the reference quantile grids.
    SampleData(Common),
    /// Pretrain the deterministic CNF of every run.
    Train(Common),
    /// Build posterior ensembles.
    Posterior {
        /// Restrict to one method.
        method: Option<Method>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate member samples and per-bin frequencies.
    Generate(Common),
    /// Cross-run coverage curves and deviations.
    Calibrate(Common),
    /// Amplification sweep over the grids.
    Amplify(Common),
    /// Jensen-Shannon closure tables.
    Closure(Common),
    /// Run every remaining stage.
    Pipeline(Common),
}

fn open(common: &Common) -> bayesamp::Result<Experiment> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.root_seed = seed;
    }
    let force_open = common.force && matches!(Experiment::peek_hash(&common.out), Some(h) if h != cfg.hash());
    Experiment::open(cfg, &common.out, force_open)
}

fn run(cli: Cli) -> bayesamp::Result<()> {
    let (stage, common) = match &cli.command {
        Command::SampleData(c) => (Stage::SampleData, c),
        Command::Train(c) => (Stage::Train, c),
        Command::Posterior { method, common } => {
            let mut exp = open(common)?;
            let tag = method.map(|m| match m {
                Method::Vib => "vib",
                Method::Mcmc => "adammcmc",
            });
            return exp.run_posterior(tag, common.force);
        }
        Command::Generate(c) => (Stage::Generate, c),
        Command::Calibrate(c) => (Stage::Calibrate, c),
        Command::Amplify(c) => (Stage::Amplify, c),
        Command::Closure(c) => (Stage::Closure, c),
        Command::Pipeline(c) => {
            let artifacts = open(c)?.run_pipeline(c.force)?;
            println!("{} files in {}", artifacts.files.len(), artifacts.root.display());
            return Ok(());
        }
    };
    open(common)?.run_stage(stage, common.force)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
