//! `fcdd` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcdd::FcddError;

use commands::{EvalArgs, HeatmapArgs, Reference, DEFAULT_ETA};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "fcdd", version, about = "Fully convolutional one-class anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Report sample- and pixel-level AUC on a labeled dataset.
    Eval {
        checkpoint: PathBuf,
        test_root: PathBuf,
        /// Upsampling sigma in pixels.
        #[arg(long)]
        sigma: Option<f64>,
        /// `pooled` or `per_sample`.
        #[arg(long, default_value = "pooled")]
        pixel_auc: String,
        /// Write per-sample scores as CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write the metrics report to a file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Render normalized full-resolution heatmaps.
    Heatmap {
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
        #[arg(long)]
        sigma: Option<f64>,
        /// `self`, `inputs`, or a labeled dataset root (balanced subset).
        #[arg(long, default_value = "self")]
        reference: String,
        /// Use the gradient baseline instead of the network heatmap.
        #[arg(long)]
        gradient: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print receptive field, stride and output size of an architecture.
    RfInfo {
        arch: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// First-layer kernel for presets.
        #[arg(long)]
        kernel: Option<usize>,
        /// Input size as HxW.
        #[arg(long)]
        input: Option<String>,
    },
    /// Generate a synthetic benchmark dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn seed_from_env(flag: Option<u64>) -> Result<u64, FcddError> {
    match std::env::var(config::SEED_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| FcddError::Config(format!("{} must be an integer, got '{v}'", config::SEED_ENV))),
        Err(_) => Ok(flag.unwrap_or(0)),
    }
}

fn run(cli: Cli) -> Result<(), FcddError> {
    match cli.command {
        Command::Train { config, set } => commands::cmd_train(&RunConfig::load(config.as_deref(), &set)?),
        Command::Eval {
            checkpoint,
            test_root,
            sigma,
            pixel_auc,
            scores,
            report,
            batch_size,
        } => commands::cmd_eval(&EvalArgs {
            checkpoint,
            test_root,
            sigma,
            pixel_mode: pixel_auc,
            scores,
            report,
            batch_size,
        }),
        Command::Heatmap {
            checkpoint,
            inputs,
            out,
            eta,
            sigma,
            reference,
            gradient,
            seed,
        } => commands::cmd_heatmap(&HeatmapArgs {
            checkpoint,
            inputs,
            out,
            eta,
            sigma,
            reference: Reference::parse(&reference),
            gradient,
            seed: seed_from_env(seed)?,
        }),
        Command::RfInfo {
            arch,
            preset,
            kernel,
            input,
        } => {
            let line = commands::cmd_rfinfo(arch.as_deref(), preset.as_deref(), kernel, input.as_deref())?;
            commands::emit(&line);
            Ok(())
        }
        Command::Synth { config, set } => commands::cmd_synth(&RunConfig::load(config.as_deref(), &set)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FcddError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
