//! `cytofuse` command-line driver.
//!
//! Subcommands: `prepare | augment | tune | train | evaluate | synth |
//! plot-data`. Exit codes: 0 success, 2 config error, 3 data error,
//! 4 numerical error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cytofuse::models::ArchId;
use cytofuse::{pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "cytofuse", version, about = "Hybrid CNN+GRU classification pipeline")]
struct Cli {
    /// Path to the flat key=value configuration file.
    #[arg(long, global = true, default_value = "cytofuse.conf")]
    config: PathBuf,

    /// Override the config file's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-class benchmark dataset.
    Synth,
    /// Scan the dataset, split it, and write the manifest.
    Prepare,
    /// Expand the training split with the seven augmentation transforms.
    Augment,
    /// Bayesian-optimize hyperparameters for one architecture.
    Tune {
        #[arg(long, value_parser = parse_arch)]
        arch: ArchId,
    },
    /// Train the deep ensemble for one architecture.
    Train {
        #[arg(long, value_parser = parse_arch)]
        arch: ArchId,
    },
    /// Fuse the three ensembles on the test split and emit metrics.
    Evaluate,
    /// Re-emit ROC and training-curve CSVs from stored artifacts.
    PlotData,
}

fn parse_arch(s: &str) -> Result<ArchId, String> {
    ArchId::from_letter(s).map_err(|e| e.to_string())
}

fn run(cli: &Cli) -> cytofuse::Result<()> {
    let mut cfg = PipelineConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match &cli.command {
        Command::Synth => pipeline::cmd_synth(&cfg),
        Command::Prepare => pipeline::cmd_prepare(&cfg),
        Command::Augment => pipeline::cmd_augment(&cfg),
        Command::Tune { arch } => pipeline::cmd_tune(&cfg, *arch),
        Command::Train { arch } => pipeline::cmd_train(&cfg, *arch),
        Command::Evaluate => pipeline::cmd_evaluate(&cfg),
        Command::PlotData => pipeline::cmd_plot_data(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
