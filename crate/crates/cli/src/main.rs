//! `uum`: generate synthetic logs, train, evaluate, export embeddings and
//! compare encoder variants, all driven by one TOML run configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. On failure the error category is printed to stderr as
//! `error-category: <config|data|numeric>` followed by the message.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uum_core::config::RunConfig;
use uum_core::{Result, UumError};

#[derive(Parser, Debug)]
#[command(name = "uum", version, about = "Cross-domain user modeling experiments")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic event log, manifest and ground-truth intents.
    Generate,
    /// Train a model and write its checkpoint and loss trace.
    Train,
    /// Evaluate a checkpoint on each user's held-out final window.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write one embedding row per user.
    Export {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate all three encoder variants over several seeds.
    Compare,
    /// Print the effective configuration.
    ShowConfig,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval { checkpoint } => commands::eval(&cfg, checkpoint.as_deref()),
        Command::Export { checkpoint } => commands::export(&cfg, checkpoint.as_deref()),
        Command::Compare => commands::compare(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn report(e: &UumError) -> ExitCode {
    let category = e.category();
    eprintln!("error-category: {}", category.as_str());
    eprintln!("error: {e}");
    ExitCode::from(category.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
