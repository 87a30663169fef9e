//! `halloc`: synthesize hallucination-annotated datasets and score detectors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use halloc_core::gateway::{BackendKind, GatewayError};

use crate::config::{ConfigError, Flags, RunConfig};

#[derive(Parser)]
#[command(name = "halloc", version, about = "Hallucination-injected dataset synthesis and detector evaluation")]
struct Cli {
    /// Seed recorded in every output header.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// LLM backend.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// TOML file with defaults for these flags and a `[gateway]` table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory of prompt templates overriding the bundled ones.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    /// Hallucination types to process (obj, attr, rel, sce).
    #[arg(long, global = true, value_delimiter = ',')]
    types: Option<Vec<String>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of scene graphs, questions and captions.
    Synth(commands::SynthArgs),
    /// Mine co-occurrence statistics.
    Mine(commands::MineArgs),
    /// Build the HQA database.
    Forge(commands::ForgeArgs),
    /// Inject HQA entries into source texts and emit dataset splits.
    Inject(commands::InjectArgs),
    /// Token-level P/R/F1 of a prediction file, with baselines.
    Eval(commands::EvalArgs),
    /// ECE/ACE by label group, and temperature scaling.
    Calibrate(commands::CalibrateArgs),
    /// Binary bias probes answered through the gateway.
    Probe(commands::ProbeArgs),
    /// Dataset composition statistics.
    Stats(commands::StatsArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<GatewayError>(), Some(GatewayError::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let run = || -> anyhow::Result<()> {
        let cfg = RunConfig::resolve(Flags {
            seed: cli.seed,
            backend: cli.backend,
            jobs: cli.jobs,
            templates: cli.templates.clone(),
            types: cli.types.clone(),
            config: cli.config.clone(),
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .map_err(|e| config::config_err(e.to_string()))?;
        match &cli.command {
            Command::Synth(a) => commands::synth(&cfg, a),
            Command::Mine(a) => commands::mine(&cfg, a),
            Command::Forge(a) => commands::forge(&cfg, a),
            Command::Inject(a) => commands::inject(&cfg, a),
            Command::Eval(a) => commands::eval(&cfg, a),
            Command::Calibrate(a) => commands::calibrate(&cfg, a),
            Command::Probe(a) => commands::probe(&cfg, a),
            Command::Stats(a) => commands::stats(&cfg, a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
