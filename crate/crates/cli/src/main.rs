//! `advlab`: train flows and classifiers, run attacks and robustness
//! evaluations from a TOML config.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
//! Failures print one JSON line `{"error": <class>, "message": ...}` to
//! stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use advlab_core::data::write_atomic;
use clap::{Parser, Subcommand};

use crate::config::{parse_overrides, RunConfig};

#[derive(Parser)]
#[command(name = "advlab", version, about = "Joint-space adversarial attacks and interpolated adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (and its exact generator).
    #[command(name = "synth-data")]
    SynthData(Args),
    /// Fit a flow by maximum likelihood.
    #[command(name = "train-flow")]
    TrainFlow(Args),
    /// Train a classifier (normal, at, om_at or ijsat).
    Train(Args),
    /// Attack a dataset and store the adversarial examples.
    Attack(Args),
    /// Run an attack suite and write a report.
    Evaluate(Args),
    /// Export the per-epoch curves of a training state.
    Curves(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML config; every key can be overridden with `--section.key value`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides applied after the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    /// An invariant the program itself guarantees was violated.
    Internal(String),
}

impl From<advlab_core::Error> for Failure {
    fn from(e: advlab_core::Error) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (class, msg, code) = match self {
            Failure::Usage(m) => ("usage", m, 2),
            Failure::Runtime(m) => ("runtime", m, 1),
            Failure::Internal(m) => ("internal", m, 1),
        };
        eprintln!("{}", serde_json::json!({ "error": class, "message": msg }));
        if code == 2 {
            eprintln!("usage: advlab <synth-data|train-flow|train|attack|evaluate|curves> --config <path> [--key value ...]");
        }
        ExitCode::from(code)
    }
}

fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("unix:{secs}")
}

fn run(name: &'static str, args: Args) -> Result<(), Failure> {
    let overrides = parse_overrides(&args.overrides).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    if let Some(p) = &args.config {
        if !p.is_file() {
            return Err(Failure::Usage(format!("config file {} does not exist", p.display())));
        }
    }
    let cfg = RunConfig::resolve(args.config.as_deref(), &overrides).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("creating {}: {e}", out.display())))?;

    // Provenance goes to disk before any computation.
    let resolved = cfg.to_toml().map_err(|e| Failure::Runtime(e.to_string()))?;
    write_atomic(&out.join(format!("{name}.config.toml")), resolved.as_bytes())?;
    let stamp = timestamp();
    let run_info = serde_json::json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_file": args.config,
        "overrides": overrides,
        "started": stamp,
    });
    write_atomic(&out.join(format!("{name}.run.json")), format!("{run_info:#}\n").as_bytes())?;

    match name {
        "synth-data" => commands::synth_data(&cfg, &out),
        "train-flow" => commands::train_flow(&cfg, &out),
        "train" => commands::train(&cfg, &out),
        "attack" => commands::attack(&cfg, &out),
        "evaluate" => commands::evaluate(&cfg, &out, &stamp),
        "curves" => commands::curves(&cfg, &out),
        _ => unreachable!("subcommands are fixed"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match cli.command {
        Command::SynthData(a) => ("synth-data", a),
        Command::TrainFlow(a) => ("train-flow", a),
        Command::Train(a) => ("train", a),
        Command::Attack(a) => ("attack", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Curves(a) => ("curves", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
