//! `partpredict`: dataset generation, training, evaluation, benchmarking,
//! tree inspection and plots for the superblock partition predictor.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partpredict::dataset::DatasetError;
use partpredict::evalbench::EvalError;
use partpredict::hfcn::HfcnError;
use thiserror::Error;

use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Model(#[from] HfcnError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Dataset(_) => "dataset",
            CliError::Model(_) => "model",
            CliError::Eval(_) => "eval",
            CliError::Internal(_) => "internal",
        }
    }

    /// 1 for problems with the inputs, 2 for failures of the tool itself.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) | CliError::Model(HfcnError::ShapeMismatch(_)) => 2,
            CliError::Eval(EvalError::Rdo(_) | EvalError::Csv(_)) => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Io(std::io::Error::other(e.to_string())),
            _ => CliError::Usage(format!("csv: {e}")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "partpredict", version, about = "Superblock partition prediction: data, training, evaluation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each overrides the matching config key.
#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for all outputs
    #[arg(short, long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Worker threads (0 = automatic); PARTPREDICT_THREADS overrides the config value
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Master seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Leave timestamps out of SVG output
    #[arg(long)]
    fixed_metadata: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label superblocks with the RDO search and write train/validation files
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Number of procedural frames when no source frames are configured
        #[arg(long, value_name = "N")]
        frames: Option<usize>,
        /// Procedural frame width
        #[arg(long, value_name = "PX")]
        width: Option<usize>,
        /// Procedural frame height
        #[arg(long, value_name = "PX")]
        height: Option<usize>,
    },
    /// Train the network and write weights plus a loss CSV
    Train {
        #[command(flatten)]
        common: Common,
        /// Optimiser steps
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
        /// Mini-batch size
        #[arg(long, value_name = "N")]
        batch_size: Option<usize>,
        /// Adam learning rate
        #[arg(long, value_name = "LR")]
        learning_rate: Option<f64>,
        /// Steps per loss CSV row
        #[arg(long, value_name = "N")]
        log_interval: Option<usize>,
    },
    /// Per-level accuracy of trained weights on the validation file
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weight file (default: model.weights under the output directory)
        #[arg(short, long, value_name = "FILE")]
        weights: Option<PathBuf>,
    },
    /// Time the encoder with and without predicted partitions
    Bench {
        #[command(flatten)]
        common: Common,
        /// Partition source: hfcn or oracle
        #[arg(long, value_name = "MODEL")]
        model: Option<String>,
        /// Weight file for the hfcn model
        #[arg(short, long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Comma-separated QP values
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        qps: Option<Vec<u8>>,
        /// Timed repetitions per encode (median is kept)
        #[arg(long, value_name = "N")]
        repeats: Option<usize>,
    },
    /// Print and draw the partition of one superblock
    ShowTree {
        #[command(flatten)]
        common: Common,
        /// PGM image holding the superblock
        #[arg(short, long, value_name = "PGM")]
        input: PathBuf,
        /// Quantizer value
        #[arg(short, long, value_name = "Q")]
        qp: u8,
        /// Raster index of the superblock within the image
        #[arg(long, value_name = "N", default_value_t = 0)]
        sb_index: usize,
        /// Also draw this model's prediction next to the search result
        #[arg(short, long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// SVG file name
        #[arg(long, value_name = "FILE", default_value = "tree.svg")]
        svg: PathBuf,
    },
    /// Draw a CSV produced by train or bench as an SVG line chart
    Plot {
        #[command(flatten)]
        common: Common,
        /// CSV file
        #[arg(short, long, value_name = "CSV")]
        input: PathBuf,
        /// Column for the horizontal axis
        #[arg(long, value_name = "COL")]
        x: Option<String>,
        /// Column(s) for the vertical axis
        #[arg(long, value_name = "COL", value_delimiter = ',')]
        y: Option<Vec<String>>,
        /// Columns whose values name separate series
        #[arg(long, value_name = "COL", value_delimiter = ',')]
        series: Option<Vec<String>>,
        /// SVG file name (default: the CSV name with .svg)
        #[arg(long, value_name = "FILE")]
        svg: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Dataset { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::ShowTree { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

fn resolve_config(c: &Common) -> Result<Config, CliError> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Ok(v) = std::env::var("PARTPREDICT_THREADS") {
        cfg.threads = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("PARTPREDICT_THREADS must be a count, got `{v}`")))?;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.fixed_metadata |= c.fixed_metadata;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli.command.common())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    match cli.command {
        Command::Dataset { frames, width, height, .. } => {
            let d = &mut cfg.dataset;
            d.procedural_frames = frames.unwrap_or(d.procedural_frames);
            d.width = width.unwrap_or(d.width);
            d.height = height.unwrap_or(d.height);
            commands::dataset(&cfg)
        }
        Command::Train { steps, batch_size, learning_rate, log_interval, .. } => {
            let t = &mut cfg.train;
            t.steps = steps.unwrap_or(t.steps);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.log_interval = log_interval.unwrap_or(t.log_interval);
            commands::train(&cfg)
        }
        Command::Eval { weights, .. } => {
            if let Some(w) = weights {
                cfg.model.weights = std::path::absolute(w)?;
            }
            commands::eval(&cfg)
        }
        Command::Bench { model, weights, qps, repeats, .. } => {
            let b = &mut cfg.bench;
            b.model = model.unwrap_or(b.model.clone());
            b.qp_set = qps.unwrap_or(b.qp_set.clone());
            b.repeats = repeats.unwrap_or(b.repeats);
            if let Some(w) = weights {
                cfg.model.weights = std::path::absolute(w)?;
            }
            commands::bench(&cfg)
        }
        Command::ShowTree { input, qp, sb_index, weights, svg, .. } => {
            commands::show_tree(&cfg, &input, qp, sb_index, weights.as_deref(), &svg)
        }
        Command::Plot { input, x, y, series, svg, .. } => commands::plot(&cfg, &input, x, y, series, svg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first:?}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
