//! `oclb` command-line driver.
//!
//! Every subcommand reads a JSON config (`--config`, optional), applies
//! `--set key.path=value` overrides and `--seed`, writes its outputs under
//! `--out`, and records provenance in `run.json`. Exit codes: 0 success,
//! 1 invalid input or configuration, 2 I/O failure.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl From<oclb::Error> for Failure {
    fn from(e: oclb::Error) -> Self {
        match e {
            oclb::Error::Io { .. } | oclb::Error::Format { .. } => Failure::Io(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "oclb", version, about = "Evaluate object-centric representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed applied to every random stage of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "OCLB_THREADS")]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "oclb-out")]
    out: PathBuf,

    /// Config override, e.g. `--set train.lr=0.01` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic sprite dataset, optionally with mock slots.
    GenSynth,
    /// Apply a distribution shift to a dataset.
    ApplyShift,
    /// Score predicted masks with ARI, SC, mSC and MSE.
    EvalMetrics,
    /// Train a property probe on slot representations.
    TrainProbe,
    /// Evaluate a trained probe, split into ID and OOD objects.
    EvalProbe,
    /// Score constant-output baselines.
    Baseline,
    /// Spearman correlations between record keys.
    Correlate,
    /// Aggregate records into medians with bootstrap intervals.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::ApplyShift => "apply-shift",
            Command::EvalMetrics => "eval-metrics",
            Command::TrainProbe => "train-probe",
            Command::EvalProbe => "eval-probe",
            Command::Baseline => "baseline",
            Command::Correlate => "correlate",
            Command::Report => "report",
        }
    }
}

fn run_with<T: DeserializeOwned>(
    value: Value,
    out: &Path,
    f: impl FnOnce(T, &Path) -> Result<Value, Failure>,
) -> Result<Value, Failure> {
    f(config::parse(value)?, out)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    let value = config::load_value(cli.config.as_deref(), &cli.set, cli.seed)?;
    let seed = value.get("seed").and_then(Value::as_u64);
    fs::create_dir_all(&cli.out).map_err(|e| Failure::Io(format!("cannot create {}: {e}", cli.out.display())))?;
    let out = cli.out.as_path();
    let effective = match cli.command {
        Command::GenSynth => run_with(value, out, commands::gen_synth)?,
        Command::ApplyShift => run_with(value, out, commands::apply_shift_cmd)?,
        Command::EvalMetrics => run_with(value, out, commands::eval_metrics)?,
        Command::TrainProbe => run_with(value, out, commands::train_probe_cmd)?,
        Command::EvalProbe => run_with(value, out, commands::eval_probe_cmd)?,
        Command::Baseline => run_with(value, out, commands::baseline_cmd)?,
        Command::Correlate => run_with(value, out, commands::correlate)?,
        Command::Report => run_with(value, out, commands::report)?,
    };
    let canonical = serde_json::to_string(&effective).expect("config serializes");
    let record = json!({
        "tool": "oclb",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cli.command.name(),
        "config_sha256": hex::encode(Sha256::digest(canonical.as_bytes())),
        "seed": seed,
        "config": effective,
    });
    let path = out.join("run.json");
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oclb {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
