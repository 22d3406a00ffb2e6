mod analyze;
mod dataset;
mod gradcheck;
mod run;
mod sweep;
mod train;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Flags owned by clap; every other `--key` is a configuration override.
const FLAGS: &[&str] = &[
    "config", "seed", "out", "threads", "help", "version", "axis", "checkpoint", "label", "dataset", "samples",
    "trials", "eps",
];

#[derive(Parser, Debug)]
#[command(
    name = "cbvit",
    version,
    about = "Context-broadcasting ViT lab: train, sweep, analyze, gradcheck",
    after_help = "Any configuration key can be overridden on the command line, e.g.\n  \
                  cbvit train --epochs 5 --cb.variant cb --cb.site mlp_mid"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed (weights and batch order).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$CBVIT_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent runs; 0 is strict single-threaded.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics, checkpoint and manifest.
    Train,
    /// Train one model per value of an axis and compare them.
    Sweep {
        /// site, block, layers, aggregation, heads or extra_block.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Attention diagnostics of one or more checkpoints.
    Analyze {
        /// Checkpoint manifest (repeatable).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Row label per checkpoint; defaults to the file stem.
        #[arg(long = "label")]
        labels: Vec<String>,
        /// CBDS dataset to draw the sample batch from.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of the model and the uniform-maximality sweep.
    Gradcheck {
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Random distributions per (N, λ) pair.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Generate a synthetic dataset file.
    MakeDataset,
}

/// Splits `--key value` / `--key=value` pairs whose key is not a clap flag.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(bin) = it.next() {
        kept.push(bin);
    }
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| !s.is_empty()) else {
            kept.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if FLAGS.contains(&key.as_str()) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| format!("override `--{key}` needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((kept, overrides))
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let result = match cli.command {
        Command::Train => train::run(&cli.common, &overrides),
        Command::Sweep { axis } => sweep::run(&cli.common, &overrides, axis),
        Command::Analyze { checkpoints, labels, dataset } => {
            analyze::run(&cli.common, &overrides, &checkpoints, &labels, dataset)
        }
        Command::Gradcheck { samples, trials, eps } => gradcheck::run(&cli.common, &overrides, samples, trials, eps),
        Command::MakeDataset => dataset::run(&cli.common, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
