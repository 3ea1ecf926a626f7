use std::path::PathBuf;
use std::process::ExitCode;

use accrisk::config::PipelineConfig;
use accrisk::pipeline::{self, Stage};
use accrisk::Error;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Traffic-accident risk inference over a city grid.
#[derive(Debug, Parser)]
#[command(name = "accrisk", version)]
struct Cli {
    /// Pipeline config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic city into the data directory.
    Synth,
    /// Extract spatio-temporal and visual features.
    Featurize,
    /// Discretize accident severity into risk levels.
    Label,
    /// Train the configured model on every cell.
    Train,
    /// Run the k-fold protocol over the configured models and feature sets.
    Eval,
    /// Predict risk levels with the trained model.
    Predict,
    /// Integrated-gradients attribution for one cell.
    Attribute,
    /// Export GeoJSON and PNG heatmaps.
    Heatmap,
    /// Print the effective config.
    Config,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Featurize => Stage::Featurize,
            Command::Label => Stage::Label,
            Command::Train => Stage::Train,
            Command::Eval => Stage::Eval,
            Command::Predict => Stage::Predict,
            Command::Attribute => Stage::Attribute,
            Command::Heatmap => Stage::Heatmap,
            Command::Config => return None,
        })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact { .. } => 2,
        Error::NonFinite { .. } | Error::Diverged(_) | Error::DegenerateLabeling(_) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.resolve(&std::env::current_dir().unwrap_or_else(|_| ".".into()));
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = load_config(&cli).and_then(|cfg| match cli.command.stage() {
        Some(stage) => pipeline::run_stage(stage, &cfg),
        None => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
