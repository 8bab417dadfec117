//! `warca`: train, evaluate and sweep WARCA metric models from the command
//! line.
//!
//! Failures print one JSON object to stderr (`{"error": category, ...}`) and
//! exit with 1 (validation/config), 2 (I/O), 3 (resource cap) or
//! 4 (numerical failure).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::commands::{EvalCmd, GramCmd, SweepCmd, SynthCmd, TrainCmd};
use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "warca", version, about = "Weighted approximate-rank metric learning")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, env = "WARCA_THREADS")]
    threads: Option<usize>,
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a linear or kernel model on a feature file.
    Train(TrainCmd),
    /// Single-shot CMC evaluation of a model, a baseline, or per-split training.
    Eval(EvalCmd),
    /// Grid search over (λ, η) on validation splits.
    Sweep(SweepCmd),
    /// Write a synthetic Gaussian dataset.
    Synth(SynthCmd),
    /// Precompute and store a Gram matrix.
    Gram(GramCmd),
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(warca::Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| warca::Error::Resource(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match &cli.command {
        Command::Train(cmd) => commands::train_cmd(cmd, &file, seed),
        Command::Eval(cmd) => commands::eval_cmd(cmd, &file, seed),
        Command::Sweep(cmd) => commands::sweep_cmd(cmd, &file, seed),
        Command::Synth(cmd) => commands::synth_cmd(cmd, seed),
        Command::Gram(cmd) => commands::gram_cmd(cmd, &file),
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<warca::Error>() {
            return e.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "validation"
}

fn exit_code(category: &str) -> u8 {
    match category {
        "io" => 2,
        "resource" => 3,
        "numerical" => 4,
        _ => 1,
    }
}

/// The error chain joined with `: `, skipping causes already quoted by the
/// message before them.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn report(category: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": category, "message": message }));
    ExitCode::from(exit_code(category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("config", e.render().to_string().trim_end().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = category(&e);
            report(cat, message(&e))
        }
    }
}
