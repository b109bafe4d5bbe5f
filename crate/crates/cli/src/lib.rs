//! Command-line pipeline around `cushion-core`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod demo;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cushion", version, about = "Prefix key/value caches that tame activation outliers for per-tensor quantization")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything not set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy model on the corpus.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Record activation ranges, optionally with a prefix in place.
    Calibrate {
        /// Model checkpoint; the bundled toy model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy prompt search; writes the prefix cache and the trace.
    Search {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Calibration sidecar, required for static range modes.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Threads for candidate scoring.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Quantization-aware tuning of a prefix cache.
    Tune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefix: PathBuf,
        /// Ranges for the tuning loss; calibrated with the prefix when omitted.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Held-out perplexity and quantization error.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefix: Option<PathBuf>,
        /// Full precision only: skip deployment and quantization.
        #[arg(long)]
        fp: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Outlier, sink, ablation or cost reports.
    Analyze {
        #[arg(value_enum)]
        report: Report,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefix: Option<PathBuf>,
        /// Search trace (cost report).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Tuning log (cost report).
        #[arg(long)]
        tune_log: Option<PathBuf>,
        /// Also write SVG figures.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// The whole chain on the bundled corpus with defaults.
    Demo {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Train a fresh model instead of using the bundled one.
        #[arg(long)]
        train: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Report {
    Outliers,
    Sinks,
    Ablation,
    Cost,
}
