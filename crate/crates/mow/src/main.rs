use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mow::error::Result;
use mow::orchestrator;
use mow_core::trainer::ActionMode;

#[derive(Parser)]
#[command(name = "mow", about = "Mixture-of-world-models multi-task RL trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config (or a builtin profile: full, desk:<K>, micro:<K>).
    Train {
        #[arg(long)]
        config: String,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "mow-run")]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate a checkpoint with the greedy policy over real episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export imagination strips (PNG) and per-frame MSE stats for one task.
    Imagine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the gradient-fingerprint similarity matrix and cluster assignment.
    ClusterReport {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            quiet,
        } => {
            let mut cfg = match mow::configfile::builtin(&config) {
                Some(cfg) => cfg,
                None => mow::configfile::load_config(std::path::Path::new(&config))?,
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let summary = orchestrator::train(&cfg, &out, !quiet)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            ckpt,
            episodes,
            seed,
        } => {
            let (model, _) = mow::checkpoint::load(&ckpt)?;
            let report = orchestrator::evaluate(&model, episodes, seed, ActionMode::Greedy)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Imagine {
            ckpt,
            task,
            count,
            out,
            seed,
        } => {
            let (model, _) = mow::checkpoint::load(&ckpt)?;
            let report = orchestrator::export_imagination(&model, task, count, seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ClusterReport { ckpt } => {
            let (model, state) = mow::checkpoint::load(&ckpt)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&orchestrator::cluster_report_json(&model, &state))?
            );
        }
    }
    Ok(())
}
