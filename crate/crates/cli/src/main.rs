use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod plot;
mod table;

#[derive(Parser, Debug)]
#[command(name = "ecvae", version, about = "Energy-calibrated VAE toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML config into a run directory.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Zero-shot restoration (colorize, srN, inpaint) of a folder of images.
    Restore(RestoreArgs),
    /// Likelihood/coverage (toy) or MSE/ELBO (images) of a checkpoint.
    Eval(EvalArgs),
    /// Figures for a run directory or a sample table.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's root seed (recorded in seed.txt).
    #[arg(long)]
    pub seed: Option<u64>,
}

/// `--ema` is the default; `--no-ema` samples from the raw parameters.
#[derive(Args, Debug, Clone, Copy)]
pub struct EmaFlag {
    #[arg(long, overrides_with = "no_ema")]
    pub ema: bool,
    #[arg(long)]
    pub no_ema: bool,
}

impl EmaFlag {
    pub fn use_ema(&self) -> bool {
        !self.no_ema
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write test-time calibrated samples (K conditional Langevin steps).
    #[arg(long)]
    pub mcmc_steps: Option<usize>,
    #[command(flatten)]
    pub ema: EmaFlag,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// colorize | srN (e.g. sr2, sr4) | inpaint
    #[arg(long)]
    pub task: String,
    /// Folder of ground-truth PNGs at the model resolution.
    #[arg(long)]
    pub input: PathBuf,
    /// PNG mask for inpaint: white = observed, black = missing.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub mcmc_steps: usize,
    #[command(flatten)]
    pub ema: EmaFlag,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of generated samples (toy); default 100000.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image folder to evaluate on instead of the config's held-out split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metric table path; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mcmc_steps: Option<usize>,
    #[command(flatten)]
    pub ema: EmaFlag,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Run directory or a sample table (.tsv).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Restore(a) => commands::restore(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => plot::run(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
