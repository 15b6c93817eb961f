use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use efcm_cli::{run_from_file, Command};

#[derive(Parser)]
#[command(name = "efcm", version, about = "Distillation, MIL fine-tuning and profiling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each run gets a fresh subdirectory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Student checkpoint to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate a synthetic patch or slide dataset.
    SynthData,
    /// Distill a student toward the teacher's features.
    Distill,
    /// Fine-tune a student on a patch classification dataset.
    Finetune,
    /// Run a MIL fine-tuning strategy on a slide dataset.
    MilRun,
    /// Count parameters and MACs and measure FPS.
    Profile,
    /// Aggregate metrics of earlier runs.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::SynthData => Command::SynthData,
            Cmd::Distill => Command::Distill,
            Cmd::Finetune => Command::Finetune,
            Cmd::MilRun => Command::MilRun,
            Cmd::Profile => Command::Profile,
            Cmd::Report => Command::Report,
        }
    }
}

fn parse_kv(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').context("expected KEY=VALUE")?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn quoted(p: &std::path::Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    for (key, path) in [("out", &cli.out), ("dataset", &cli.dataset), ("checkpoint", &cli.checkpoint)] {
        if let Some(p) = path {
            overrides.push((key.into(), quoted(p)));
        }
    }
    match run_from_file(cli.command.into(), cli.config.as_deref(), &overrides) {
        Ok(dir) => {
            println!("{}", dir.path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
