mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phs_core::Error;

#[derive(Parser, Debug)]
#[command(name = "phs", version, about = "Pseudo-healthy synthesis: phantoms, training, evaluation, reports")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed for generation or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; every artifact lands under it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file of settings; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (the engine runs single-threaded; recorded only).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a method (paired, unpaired, cgan, cyclegan) or the evaluation segmentor (fpre).
    Train(TrainArgs),
    /// Evaluate a trained run on the held-out subjects.
    Eval(EvalArgs),
    /// Aggregate metrics files into a method-by-metric table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub subjects: Option<u32>,
    /// Image size as HxW, e.g. 64x64.
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long)]
    pub slices: Option<u32>,
    #[arg(long)]
    pub lesion_prob: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// paired | unpaired | cgan | cyclegan | fpre
    #[arg(long)]
    pub mode: Option<String>,
    /// Dataset directory written by `phs phantom`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// First-layer channel count (32 reproduces the reference tables).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub hh_cycle_weight: Option<f64>,
    #[arg(long)]
    pub cycle_weight: Option<f64>,
    /// Continue the run stored in this directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (the run stays resumable).
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `phs train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Run directory of the evaluation segmentor (`phs train --mode fpre`).
    #[arg(long)]
    pub fpre: Option<PathBuf>,
    /// Dataset directory; defaults to the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use the input itself as the pseudo-healthy output.
    #[arg(long)]
    pub self_identity: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// metrics.json files or directories containing one.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Accept inputs evaluated on different datasets.
    #[arg(long)]
    pub allow_mixed: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Phantom(a) => commands::phantom(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Report(a) => commands::report(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
