//! Command-line driver for the omission pipeline: analysis, cold-start
//! synthesis, SFT, omit-aware RL, evaluation and bound checks.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Flags;
use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "agent-omit", version, about = "Train and analyse agents that omit redundant context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel rollouts.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Policy checkpoint to start from or evaluate.
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    /// Input run directory (repeatable for `report`).
    #[arg(long, global = true)]
    data: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Attribution curve and omission interventions.
    Analyze,
    /// Build omission-aware SFT datasets from expert trajectories.
    Synthesize,
    /// Fit the reference policy and fine-tune it on synthesized data.
    Sft,
    /// Omit-aware GRPO from an SFT checkpoint.
    Train,
    /// Success and token statistics of a policy or the oracle.
    Eval,
    /// Empirical check of the KL deviation bound.
    VerifyTheory,
    /// Aggregate earlier runs into tables.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Synthesize => "synthesize",
            Command::Sft => "sft",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::VerifyTheory => "verify-theory",
            Command::Report => "report",
        }
    }
}

fn config_error(field: &str, message: &str) -> anyhow::Error {
    ConfigError { field: field.to_string(), message: message.to_string() }.into()
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    let out = match (&cli.out, &config.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => return Err(config_error("out", "no output directory; pass --out or set `out`")),
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(config_error("--workers", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    std::fs::create_dir_all(&out)?;
    let flags = Flags { policy: cli.policy.clone(), data: cli.data.clone() };
    let stage = match cli.command {
        Command::Analyze => commands::analyze,
        Command::Synthesize => commands::synthesize_cmd,
        Command::Sft => commands::sft,
        Command::Train => commands::train,
        Command::Eval => commands::eval,
        Command::VerifyTheory => commands::verify_theory,
        Command::Report => commands::report,
    };
    let mut inputs = stage(&config, &flags, &out)?;
    if let Some(path) = &cli.config {
        inputs.insert(0, path.clone());
    }
    manifest::write(cli.command.name(), &config, &inputs, Path::new(&out))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
