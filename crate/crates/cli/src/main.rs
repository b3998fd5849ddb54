//! `gemflow`: sample toy datasets, run particle-transport training, score the
//! result, and render plots.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric fault
//! during a run, 4 file or parse error.

mod commands;
mod config;
mod svg;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gemflow::datasets::{DatasetId, DatasetSpec};
use gemflow::{Error, Result};

use commands::{EvalArgs, PlotArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "gemflow",
    version,
    about = "Particle transport toward 2D target distributions by per-step fitted velocity fields"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a seeded sample from a named dataset and write it as CSV.
    SampleData {
        /// One of: eight_gaussians, pinwheel, moons, checkerboard, two_spirals,
        /// circles, four_squares, five_squares, small_four_gaussians,
        /// large_four_gaussians, gaussian_ref, uniform_ref.
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Dataset-specific noise level, for datasets that take one.
        #[arg(long)]
        noise: Option<f64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) a transport run described by a config file.
    TrainFlow {
        /// Config file; omitted means the documented defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's sample size.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides the config's target dataset.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Score a particle file against fresh draws from a dataset.
    Eval {
        /// Particle CSV to score.
        #[arg(long)]
        points: PathBuf,
        /// Target dataset name.
        #[arg(long)]
        dataset: String,
        /// Target sample size; defaults to the particle count.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        noise: Option<f64>,
        /// Output CSV path (metric,value,baseline).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG plots from run artifacts.
    Plot {
        /// Particle CSV; renders scatter.svg.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Diagnostics record CSV; renders trace.svg.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Density grid CSV; renders heatmap.svg.
        #[arg(long)]
        density: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn dataset_spec(dataset: &str, seed: u64, scale: f64, noise: Option<f64>) -> Result<DatasetSpec> {
    Ok(DatasetSpec {
        id: DatasetId::parse(dataset)?,
        scale,
        noise,
        seed,
    })
}

/// GEMFLOW_THREADS caps the rayon pool; unset means rayon's default.
fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("GEMFLOW_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| {
        Error::InvalidConfig(format!(
            "GEMFLOW_THREADS wants a positive integer, got '{}'",
            raw
        ))
    })?;
    if threads == 0 {
        return Err(Error::InvalidConfig(
            "GEMFLOW_THREADS wants a positive integer, got '0'".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool setup failed: {}", e)))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SampleData {
            dataset,
            n,
            seed,
            scale,
            noise,
            out,
        } => commands::run_sample_data(&dataset_spec(&dataset, seed, scale, noise)?, n, &out),
        Cmd::TrainFlow {
            config,
            out,
            seed,
            n,
            dataset,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
                        path: path.display().to_string(),
                        source: e,
                    })?;
                    RunConfig::parse(&text)?
                }
                None => RunConfig::default(),
            };
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(seed) = seed {
                cfg.flow.seed = seed;
            }
            if let Some(n) = n {
                cfg.n = n;
            }
            if let Some(dataset) = dataset {
                cfg.dataset = DatasetId::parse(&dataset)?;
            }
            commands::run_train_flow(&cfg)
        }
        Cmd::Eval {
            points,
            dataset,
            n,
            seed,
            scale,
            noise,
            out,
        } => commands::run_eval(&EvalArgs {
            points,
            spec: dataset_spec(&dataset, seed, scale, noise)?,
            n,
            out,
        }),
        Cmd::Plot {
            points,
            record,
            density,
            out,
        } => commands::run_plot(&PlotArgs {
            points,
            record,
            density,
            out_dir: out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_thread_pool().and_then(|()| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(commands::exit_code_for(&err) as u8)
        }
    }
}
