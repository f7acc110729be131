//! Command-line orchestration: one JSON config, one subcommand per pipeline stage.

mod config;
mod stages;
mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::tokenizer::LossMode;

pub use config::{RunConfig, SweepAxes, SweepCell, SyntheticConfig, SyntheticKind};
pub use stages::{assign, evaluate, report, synth, train_generator, train_tokenizer, Layout};
pub use sweep::{sweep, worker_threads};

#[derive(Debug, Parser)]
#[command(name = "cost", about = "Contrastive semantic tokenizer and generative retrieval pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Tokenizer loss: re, co or re+co (overrides `tokenizer.loss_mode`)
    #[arg(long = "loss-mode", global = true)]
    pub loss_mode: Option<LossMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog and behavior sequences.
    Synth,
    /// Fit the residual-quantization tokenizer on the catalog embeddings.
    TrainTokenizer,
    /// Assign semantic token tuples to every catalog item.
    Assign,
    /// Train the sequence-to-token generator on the training histories.
    TrainGenerator,
    /// Retrieve for every test history and score against the held-out item.
    Evaluate,
    /// Run the pipeline over the cartesian product of the sweep axes.
    Sweep,
    /// Render stored reports as text tables.
    Report,
}

/// Loads the configuration and applies flag overrides (flags win).
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Usage("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = cli.loss_mode {
        cfg.tokenizer.loss_mode = mode;
    }
    cfg.derive_stage_seeds();
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let layout = Layout::new(&cfg);
    match cli.command {
        Command::Synth => synth(&cfg, &layout),
        Command::TrainTokenizer => train_tokenizer(&cfg, &layout),
        Command::Assign => assign(&cfg, &layout),
        Command::TrainGenerator => train_generator(&cfg, &layout),
        Command::Evaluate => evaluate(&cfg, &layout).map(|r| print!("{}", r.to_table())),
        Command::Sweep => sweep(&cfg, &layout),
        Command::Report => report(&layout).map(|text| print!("{}", text)),
    }
}

/// Parses `args`, runs the command and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cost: {}", e);
            e.exit_code()
        }
    }
}
