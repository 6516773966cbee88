//! `efem`: train shape priors, synthesize scenes, segment them and score the results.
//!
//! Exit codes: 0 success, 2 user or configuration error, 3 numeric failure.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "efem", version, about = "Unsupervised 3D instance segmentation with equivariant shape priors")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config for the chosen command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a learned prior and encode its shape library.
    Train(commands::train::TrainArgs),
    /// Generate synthetic scenes with ground truth.
    Synth(commands::synth::SynthArgs),
    /// Segment one scene.
    Segment(commands::segment::SegmentArgs),
    /// Score segmentation reports against ground truth.
    Eval(commands::eval::EvalArgs),
    /// Print a checkpoint's topology or a library's size.
    Inspect(commands::inspect::InspectArgs),
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("EFEM_LOG", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(CliError::user("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::user(format!("cannot start worker pool: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Train(a) => commands::train::run(g, a),
        Command::Synth(a) => commands::synth::run(g, a),
        Command::Segment(a) => commands::segment::run(g, a),
        Command::Eval(a) => commands::eval::run(g, a),
        Command::Inspect(a) => commands::inspect::run(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
