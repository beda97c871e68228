//! `sage`: synthetic data generation, source pretraining, per-source adapter
//! adaptation, gated merging, evaluation and inspection.
//!
//! Exit codes: 0 ok, 2 configuration, 3 missing prerequisite file,
//! 4 numerical failure, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Failure;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sage", version, about = "Multi-source adapter adaptation with gated merging")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides `paths.models`.
    #[arg(long, global = true)]
    models: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate every source domain and the target domain plus a manifest.
    GenData {
        /// Output directory; overrides `paths.data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised pretraining on one labeled source domain.
    Pretrain {
        #[arg(long)]
        source: usize,
    },
    /// Adapter adaptation of source models on the unlabeled target.
    Adapt {
        /// Adapt only this source; all sources otherwise.
        #[arg(long)]
        source: Option<usize>,
        /// Number of experts adapted concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_experts: usize,
    },
    /// Average the source backbones, attach every expert and train the gate.
    MergeTrain,
    /// Retrieval metrics of a checkpoint on the target query/gallery split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Parameter census of a checkpoint and, for merged models, mean gate
    /// coefficients per layer.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(Failure::Config)?;
    if let Some(d) = cli.data {
        cfg.paths.data = d;
    }
    if let Some(m) = cli.models {
        cfg.paths.models = m;
    }
    if let Command::GenData { out: Some(out) } = &cli.command {
        cfg.paths.data = out.clone();
    }
    let resolved = cfg.resolved();
    log::info!("effective configuration:\n{}", resolved.to_toml());
    let ctx = commands::Context::new(resolved)?;
    match cli.command {
        Command::GenData { .. } => ctx.gen_data(),
        Command::Pretrain { source } => ctx.pretrain(source),
        Command::Adapt {
            source,
            parallel_experts,
        } => ctx.adapt(source, parallel_experts),
        Command::MergeTrain => ctx.merge_train(),
        Command::Eval { model } => ctx.eval(&model),
        Command::Inspect { model } => ctx.inspect(&model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SAGE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
