//! `gloc`: batch front end for data valuation runs.
//!
//! Every command reads one TOML config (plus overrides), writes its outputs
//! into a fresh output directory, and finishes with `manifest.json` and
//! `runtime.json`. Exit codes: 0 on success, 1 for validation or I/O
//! failures, 2 for usage errors.

mod commands;
mod config;
mod output;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "gloc", version, about = "Data valuation with AME, GLOC, refinement and dynamic updates")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sampling.m=200`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Top-level seed; every component seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, env = "GLOC_WORKERS", global = true)]
    pub workers: Option<usize>,
    /// Output directory. Must be new or empty unless `--force` is given.
    #[arg(long, global = true, default_value = "gloc-out")]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ame,
    Gloc,
    Mc,
    Tmc,
    Exact,
    AmeTruth,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the two-Gaussian task (train/valid/test splits).
    GenData {
        /// Fraction of train labels to flip.
        #[arg(long)]
        noise: Option<f64>,
        /// Also write `extra.csv` with this many fresh points, for dynamic-add.
        #[arg(long, default_value_t = 0)]
        extra: usize,
    },
    /// Sample subsets, train one model per subset and store the design matrix.
    Sample {
        #[arg(long)]
        data: PathBuf,
        /// Number of sampled subsets.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Estimate per-sample values.
    Value {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `sample`; sampled in-process when absent (ame, gloc).
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        permutations: Option<usize>,
    },
    /// Smooth existing values over the similarity graph.
    Refine {
        #[arg(long)]
        data: PathBuf,
        /// An `id,value` table; a sibling `.meta.json` is used when present.
        #[arg(long)]
        values: PathBuf,
        #[arg(long)]
        eta1: Option<f64>,
        #[arg(long)]
        eta2: Option<f64>,
    },
    /// Update stored values after adding samples.
    DynamicAdd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Dataset table of the new samples.
        #[arg(long)]
        added: PathBuf,
    },
    /// Update stored values after removing samples.
    DynamicRemove {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Ids to remove, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        remove: Vec<u64>,
    },
    /// Flag the low-value 2-means cluster and score it against a noise mask.
    DetectNoise {
        #[arg(long)]
        values: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Accuracy while removing or adding train samples in value order.
    Curve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        values: PathBuf,
        /// Directions to trace; defaults to `curve.directions`.
        #[arg(long = "direction")]
        directions: Vec<String>,
    },
    /// MSE, MAE and Spearman between value vectors.
    Compare {
        /// Value tables; all pairs are compared unless `--reference` is given.
        #[arg(long, required = true)]
        values: Vec<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Render curve tables as SVG and metric tables as Markdown.
    Report {
        #[arg(long)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        metrics: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Sample { .. } => "sample",
            Command::Value { .. } => "value",
            Command::Refine { .. } => "refine",
            Command::DynamicAdd { .. } => "dynamic-add",
            Command::DynamicRemove { .. } => "dynamic-remove",
            Command::DetectNoise { .. } => "detect-noise",
            Command::Curve { .. } => "curve",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
        }
    }
}

/// A failure reported with exit code 1.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { kind: "config", message: msg.into() }
    }
    pub fn input(msg: impl Into<String>) -> Self {
        CliError { kind: "input", message: msg.into() }
    }
    pub fn output(msg: impl Into<String>) -> Self {
        CliError { kind: "output", message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<gloc_core::Error> for CliError {
    fn from(e: gloc_core::Error) -> Self {
        use gloc_core::Error as E;
        let kind = match &e {
            E::InvalidParameter(_) | E::EmptyGrid => "invalid-parameter",
            E::InsufficientData(_) | E::EmptyDataset => "insufficient-data",
            E::DimensionMismatch(_) => "dimension-mismatch",
            E::NonFinite(_) => "non-finite",
            E::Degenerate(_) => "degenerate",
            E::Parse { .. } | E::Schema { .. } | E::Csv(_) | E::Json(_) => "input",
            E::IdMismatch(_) => "id-mismatch",
            E::Provenance(_) => "provenance",
            E::Row { .. } => "utility",
            E::TooLarge { .. } => "too-large",
            E::Io(_) => "io",
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { kind: "io", message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { kind: "input", message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("{}", json!({"error": "usage", "message": "--workers must be at least 1"}));
            return ExitCode::from(2);
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", json!({"error": "workers", "message": e.to_string()}));
            return ExitCode::from(1);
        }
    };
    match pool.install(|| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "command": cli.command.name(), "message": e.message}));
            ExitCode::from(1)
        }
    }
}
