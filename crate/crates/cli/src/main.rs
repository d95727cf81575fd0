//! `anclaf <gen-data|train|eval|trace>`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anclaf::io::{
    atomic_write, load_checkpoint, load_dataset, save_dataset, to_json_bytes, trace_subject, write_report, write_trace,
};
use anclaf::model::Variant;
use anclaf::synth::gen_dataset;
use anclaf::train::{evaluate_checkpoint, run_cross_validation, RunContext};
use anclaf::{StagePlan, TrainConfig};
use clap::{Parser, Subcommand};

const THREADS_VAR: &str = "ANCLAF_THREADS";

#[derive(Parser)]
#[command(name = "anclaf", version, about = "Continuous affect estimation on synthetic face sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData {
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the selected stages over every fold.
    Train {
        /// JSON object with `TrainConfig` keys; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all", value_parser = ["base", "seq", "attn", "all"])]
        stage: String,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on its validation fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; the report goes to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-frame predictions for one subject as CSV.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let config = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::usage(format!("{}: line {} column {}: {e}", p.display(), e.line(), e.column()))
            })?
        }
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(config)
}

fn threads() -> Result<usize, Failure> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            subjects,
            frames,
            seed,
            out,
        } => {
            if frames == 0 {
                return Err(Failure::usage("--frames must be at least 1"));
            }
            let dataset = gen_dataset(subjects, frames, seed).map_err(|e| Failure::usage(e.to_string()))?;
            save_dataset(&out, &dataset).map_err(Failure::runtime)?;
            println!(
                "wrote {} subjects x {} frames ({} records, seed {seed}) to {}",
                subjects,
                frames,
                dataset.frame_count(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            stage,
            out,
            quiet,
        } => {
            let config = read_config(config.as_deref())?;
            let plan = StagePlan::parse(&stage).ok_or_else(|| Failure::usage(format!("unknown stage {stage}")))?;
            let ctx = RunContext {
                out_dir: Some(out.clone()),
                verbose: !quiet,
                threads: threads()?,
                fold: None,
            };
            let dataset = load_dataset(&data).map_err(Failure::runtime)?;
            let result = run_cross_validation::<f64>(&config, &dataset, plan, &ctx).map_err(Failure::runtime)?;
            atomic_write(&out.join("results.json"), &to_json_bytes(&result).map_err(Failure::runtime)?)
                .map_err(Failure::runtime)?;
            for r in &result.reports {
                println!(
                    "model={} rmse={:.6} cor={:.6} ccc={:.6} icc={:.6}",
                    r.model, r.avg.rmse, r.avg.cor, r.avg.ccc, r.avg.icc
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => {
            let ck = load_checkpoint::<f64>(&checkpoint).map_err(Failure::runtime)?;
            let dataset = load_dataset(&data).map_err(Failure::runtime)?;
            let outcome = evaluate_checkpoint(&ck, &dataset).map_err(Failure::runtime)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            match report {
                Some(path) => write_report(&path, &outcome.report).map_err(Failure::runtime)?,
                None => {
                    let bytes = to_json_bytes(&outcome.report).map_err(Failure::runtime)?;
                    print!("{}", String::from_utf8_lossy(&bytes));
                }
            }
        }
        Command::Trace {
            checkpoint,
            data,
            subject,
            out,
        } => {
            let ck = load_checkpoint::<f64>(&checkpoint).map_err(Failure::runtime)?;
            let dataset = load_dataset(&data).map_err(Failure::runtime)?;
            let s = dataset
                .subject(subject)
                .ok_or_else(|| Failure::usage(format!("unknown subject {subject}")))?;
            let rows = trace_subject(&ck.model, s).map_err(Failure::runtime)?;
            let columns = match ck.model.arch.variant {
                Variant::SequenceAttention => ck.model.arch.seq_len,
                _ => 0,
            };
            write_trace(&out, &rows, columns).map_err(Failure::runtime)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
