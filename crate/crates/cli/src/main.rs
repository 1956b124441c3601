mod config;
mod pipeline;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use memfab::defense::Backend;
use pipeline::{Run, STAGES};

#[derive(Parser)]
#[command(name = "memfab", version, about = "Membership fabrication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for shadow training and fabrication.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Gradient-norm backend for detection and robust inference.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Exact,
    Fd,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the split and train the target and shadow models.
    Train,
    /// Fabricate perturbed nonmembers and score them against members.
    Fabricate,
    /// Membership inference on natural members and nonmembers.
    Audit,
    /// Gradient-norm detection of fabricated queries.
    Detect,
    /// Weighted membership inference on a mixed query set.
    Robust,
    /// Tables, curves and plots from the saved outcomes.
    Report,
    /// Every stage in order.
    Run,
}

impl Command {
    fn stages(self) -> Vec<&'static str> {
        match self {
            Self::Train => vec!["train"],
            Self::Fabricate => vec!["fabricate"],
            Self::Audit => vec!["audit"],
            Self::Detect => vec!["detect"],
            Self::Robust => vec!["robust"],
            Self::Report => vec!["report"],
            Self::Run => STAGES.to_vec(),
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(b) = cli.backend {
        cfg.detect.backend = match b {
            BackendArg::Exact => Backend::Exact,
            BackendArg::Fd => Backend::FiniteDifference,
        };
    }
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    let out = cfg.out.clone();
    let mut run = Run::open(cfg, out)?;
    for stage in cli.command.stages() {
        run.run_stage(stage)?;
        let hit = run.manifest.stages.get(stage).is_some_and(|r| r.cache_hit);
        eprintln!("{stage}: {}", if hit { "cached" } else { "done" });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
