use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use commands::Study;
use config::RunConfig;

/// Surrogate metasurface spectra: dataset generation, training, studies and export.
#[derive(Parser, Debug)]
#[command(name = "metascreen", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.hidden_size=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; overrides `paths.out`, which overrides `METASCREEN_OUT`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and store a surrogate dataset.
    Gen,
    /// Cross-validate the configured model and keep per-fold checkpoints.
    Train,
    /// Run one of the studies.
    Experiment {
        #[arg(long, value_enum)]
        study: Study,
    },
    /// Predicted and oracle spectra for one pattern file.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 25 lines of 25 '0'/'1' characters.
        #[arg(long)]
        pattern: PathBuf,
        /// Defaults to `<out>/export.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let env_out = std::env::var_os("METASCREEN_OUT").map(PathBuf::from);
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.out, env_out)?;
    match cli.command {
        Command::Gen => commands::gen(&cfg, cli.force),
        Command::Train => commands::train(&cfg, cli.force),
        Command::Experiment { study } => commands::experiment(&cfg, study, cli.force),
        Command::Export {
            checkpoint,
            pattern,
            output,
        } => commands::export(&cfg, &checkpoint, &pattern, output.as_deref(), cli.force),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
