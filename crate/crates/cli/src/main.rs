//! Experiment runner: `run`, `curve`, `oracle` and `preprocess`.
//!
//! Log verbosity follows `HAMPRUNE_LOG` (`error`, `warn`, `info`, `debug`),
//! default `info`. Exit code 2 marks an unusable config, 1 a failed run.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hamprune::search::Strategy;

use commands::Stage;
use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "hamprune", version, about = "Embedding-size search for CTR models by hard-mask pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, search and retrain for every configured seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
    /// Aggregate reports into a test-AUC versus parameter-count table.
    Curve {
        /// Glob selecting report files, for example `runs/*.report.json`.
        #[arg(long)]
        reports: String,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the searched mask against every mask of the same size.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Load the configured data source and write a binary split cache.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Cache file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, replacing the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        Ok(cfg)
    }
}

fn parse_strategy(name: &str) -> Result<Strategy, String> {
    Strategy::parse(name).map_err(|e| e.to_string())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { common, stage } => {
            let cfg = common.resolve()?;
            commands::run(&cfg, stage)?;
        }
        Command::Curve { reports, out } => {
            commands::curve(&reports, out.as_deref())?;
        }
        Command::Oracle { common } => {
            let cfg = common.resolve()?;
            commands::oracle(&cfg)?;
        }
        Command::Preprocess { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::preprocess(&cfg, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HAMPRUNE_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
