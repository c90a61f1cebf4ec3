//! The `sdlpgc` command-line interface.
//!
//! Commands: `prepare`, `train`, `evaluate`, `forecast`, `ablation`,
//! `export-graphs`, `plot`. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure. `SDLPGC_CACHE_ROOT` overrides the prepare cache
//! location.

pub mod commands;
pub mod experiment;
pub mod plot;

pub use commands::{
    cmd_ablation, cmd_evaluate, cmd_export_graphs, cmd_forecast, cmd_plot, cmd_prepare,
    cmd_train, SplitName, CACHE_ROOT_ENV,
};
pub use experiment::ExperimentConfig;

use crate::data::NanPolicy;
use crate::error::Result;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NanPolicyArg {
    /// Reject datasets containing NaN cells (default).
    Reject,
    /// Linearly interpolate interior NaN runs of length <= 2 per node.
    Interpolate,
}

impl From<NanPolicyArg> for NanPolicy {
    fn from(v: NanPolicyArg) -> Self {
        match v {
            NanPolicyArg::Reject => NanPolicy::Reject,
            NanPolicyArg::Interpolate => NanPolicy::InterpolateShortGaps,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(v: SplitArg) -> Self {
        match v {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sdlpgc",
    version,
    about = "Graph-learning forecaster for geo-coded multivariate time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dataset and cache its normalized chronological splits.
    Prepare {
        /// Dataset descriptor JSON ({name, values_path, coords_path, ...}).
        #[arg(long)]
        descriptor: PathBuf,
        /// Cache root (default: $SDLPGC_CACHE_ROOT or ./sdlpgc-cache).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "reject")]
        nan_policy: NanPolicyArg,
        /// Window length used for the summary's window counts.
        #[arg(long, default_value_t = 12)]
        input_len: usize,
        /// Horizon length used for the summary's window counts.
        #[arg(long, default_value_t = 12)]
        horizon: usize,
    },
    /// Train a model from an experiment config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override config values, e.g. --set train.epochs=20
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on one split at horizons 3/6/9/12.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include mean restart probabilities in the metrics JSON.
        #[arg(long)]
        alpha: bool,
        #[arg(long, value_enum, default_value = "reject")]
        nan_policy: NanPolicyArg,
    },
    /// Emit a de-normalized forecast for one window.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Window start index within the split (default: the last window).
        #[arg(long)]
        window_start: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "reject")]
        nan_policy: NanPolicyArg,
    },
    /// Train and score all five variants; emit the ablation table.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Export the learned adjacency matrices as CSV.
    ExportGraphs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        descriptor: PathBuf,
        /// Test-split window index for the dynamic graph sample.
        #[arg(long, default_value_t = 0)]
        window_index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "reject")]
        nan_policy: NanPolicyArg,
    },
    /// Render loss curves, metric bars, and adjacency heatmaps as PNGs.
    Plot {
        /// Run directory holding train_log.ndjson / metrics-*.json /
        /// *_adjacency.csv.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            descriptor,
            cache_dir,
            nan_policy,
            input_len,
            horizon,
        } => cmd_prepare(&descriptor, nan_policy.into(), cache_dir, input_len, horizon),
        Command::Train { config, overrides } => cmd_train(&config, &overrides).map(|_| ()),
        Command::Evaluate {
            checkpoint,
            descriptor,
            split,
            out,
            alpha,
            nan_policy,
        } => cmd_evaluate(
            &checkpoint,
            &descriptor,
            split.into(),
            out,
            alpha,
            nan_policy.into(),
        ),
        Command::Forecast {
            checkpoint,
            descriptor,
            split,
            window_start,
            out,
            nan_policy,
        } => cmd_forecast(
            &checkpoint,
            &descriptor,
            split.into(),
            window_start,
            out,
            nan_policy.into(),
        ),
        Command::Ablation { config, overrides } => cmd_ablation(&config, &overrides).map(|_| ()),
        Command::ExportGraphs {
            checkpoint,
            descriptor,
            window_index,
            out,
            nan_policy,
        } => cmd_export_graphs(
            &checkpoint,
            &descriptor,
            window_index,
            out,
            nan_policy.into(),
        ),
        Command::Plot { run_dir, out } => cmd_plot(&run_dir, out),
    }
}
