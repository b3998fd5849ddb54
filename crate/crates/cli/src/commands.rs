//! The four subcommands behind the `gemflow` binary.
//!
//! `train-flow` is checkpointed: every `checkpoint_every` iterations it writes
//! `particles_<k>.csv`, `net_<k>.json`, and the cumulative `record.csv`, each
//! atomically. Re-running the same command in the same directory picks up from
//! the newest complete checkpoint and, because per-iteration randomness is
//! keyed by absolute iteration index, reproduces the uninterrupted run bit for
//! bit.

use std::fs;
use std::path::{Path, PathBuf};

use gemflow::datasets::{self, DatasetSpec};
use gemflow::flow::{self, RunRecord};
use gemflow::io;
use gemflow::mat::Matrix;
use gemflow::metrics::{self, Bandwidth, DensityGrid, GridSpec};
use gemflow::net::{network_init, Network};
use gemflow::velocity::Kernel;
use gemflow::{mix_seed, Error, Result};

use crate::config::{OuterBlock, RunConfig};
use crate::svg;

/// Process exit code for an error: 2 for configuration and usage problems,
/// 3 for numeric faults, 4 for file and parse trouble.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::ShapeMismatch(_) | Error::InvalidArgument(_) => 2,
        Error::NumericFault(_) | Error::UndefinedRatio { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } => 4,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn run_sample_data(spec: &DatasetSpec, n: usize, out: &Path) -> Result<()> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let batch = datasets::sample(spec, n)?;
    io::write_points(out, &batch)
}

fn full_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

pub fn run_train_flow(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    io::write_atomic(&cfg.out_dir.join("config.txt"), &cfg.serialize())?;
    let target = datasets::sample(&cfg.target_spec(), cfg.n)?;

    if let Some(outer) = &cfg.outer {
        return run_outer(cfg, outer, &target);
    }

    let reference = datasets::sample(&cfg.reference_spec(), cfg.n)?;
    let total = cfg.flow.iterations;
    if total == 0 {
        // No transport: emit the reference sample as the (trivial) result.
        io::write_points(&cfg.out_dir.join("particles_0.csv"), &reference)?;
        io::write_record(&cfg.out_dir.join("record.csv"), &RunRecord::new())?;
        if cfg.plots {
            write_plots(cfg, &target, &reference, &RunRecord::new())?;
        }
        return Ok(());
    }

    let widths = full_widths(2, &cfg.net_hidden, 1);
    let (mut done, mut particles, mut net, mut record) =
        resume_or_init(cfg, &reference, &widths, total)?;
    if done > 0 {
        eprintln!("resuming from checkpoint at iteration {}", done);
    }

    while done < total {
        let next = (done + cfg.checkpoint_every).min(total);
        let mut seg = cfg.flow;
        seg.iterations = next - done;
        seg.iteration_offset = done;
        match flow::inner_loop(&particles, &target, &net, &seg) {
            Ok((p, fitted, seg_record)) => {
                particles = p;
                net = fitted;
                record.extend(&seg_record)?;
                write_checkpoint(cfg, next, &particles, &net, &record)?;
                done = next;
            }
            Err(aborted) => {
                // Keep whatever diagnostics the segment produced before the
                // fault; the checkpoint files on disk stay at `done`.
                let _ = record.extend(&aborted.record);
                let _ = io::write_record(&cfg.out_dir.join("record.csv"), &record);
                return Err(aborted.error);
            }
        }
    }

    if cfg.plots {
        write_plots(cfg, &target, &particles, &record)?;
    }
    Ok(())
}

fn write_checkpoint(
    cfg: &RunConfig,
    k: usize,
    particles: &Matrix,
    net: &Network,
    record: &RunRecord,
) -> Result<()> {
    io::write_points(&cfg.out_dir.join(format!("particles_{}.csv", k)), particles)?;
    io::write_network(&cfg.out_dir.join(format!("net_{}.json", k)), net)?;
    io::write_record(&cfg.out_dir.join("record.csv"), record)
}

/// Finds the newest complete checkpoint (both the particle file and the
/// network file present) at or below `total`, or starts fresh from the
/// reference sample and a seeded initial network.
fn resume_or_init(
    cfg: &RunConfig,
    reference: &Matrix,
    widths: &[usize],
    total: usize,
) -> Result<(usize, Matrix, Network, RunRecord)> {
    if let Some(k) = newest_checkpoint(&cfg.out_dir, total) {
        let particles = io::read_points(&cfg.out_dir.join(format!("particles_{}.csv", k)))?;
        let net = io::read_network(&cfg.out_dir.join(format!("net_{}.json", k)))?;
        let record_path = cfg.out_dir.join("record.csv");
        let mut record = RunRecord::new();
        if record_path.exists() {
            // Rows past the checkpoint cannot exist (the record is written
            // last), but guard against hand-edited directories anyway.
            for row in io::read_record(&record_path)?.rows() {
                if row.iteration <= k {
                    record.push(*row)?;
                }
            }
        }
        return Ok((k, particles, net, record));
    }
    let net = network_init(widths, mix_seed(cfg.flow.seed, 2))?;
    Ok((0, reference.clone(), net, RunRecord::new()))
}

fn newest_checkpoint(dir: &Path, total: usize) -> Option<usize> {
    let entries = fs::read_dir(dir).ok()?;
    let mut best = None;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(k) = name
            .strip_prefix("particles_")
            .and_then(|r| r.strip_suffix(".csv"))
            .and_then(|r| r.parse::<usize>().ok())
        else {
            continue;
        };
        if k >= 1 && k <= total && dir.join(format!("net_{}.json", k)).exists() {
            best = best.max(Some(k));
        }
    }
    best
}

/// Generator-distillation run: alternate transport with generator refits,
/// then sample the final generator. Writes one checkpoint triple at the end
/// (the network file holds the generator).
fn run_outer(cfg: &RunConfig, outer: &OuterBlock, target: &Matrix) -> Result<()> {
    let latent_dim = outer.latent_dim;
    let gen_widths = full_widths(latent_dim, &outer.gen_hidden, 2);
    let gen0 = network_init(&gen_widths, mix_seed(cfg.flow.seed, 3))?;
    let sampler = |count: usize, seed: u64| datasets::standard_normal(count, latent_dim, seed);

    match flow::outer_loop(&gen0, sampler, target, &cfg.flow, &outer.cfg) {
        Ok((gen, record)) => {
            let total = outer.cfg.rounds * outer.cfg.inner_per_outer;
            let latents = datasets::standard_normal(cfg.n, latent_dim, mix_seed(cfg.flow.seed, 4))?;
            let particles = gen.forward(&latents)?;
            write_checkpoint(cfg, total, &particles, &gen, &record)?;
            if cfg.plots {
                write_plots(cfg, target, &particles, &record)?;
            }
            Ok(())
        }
        Err(aborted) => {
            let _ = io::write_record(&cfg.out_dir.join("record.csv"), &aborted.record);
            Err(aborted.error)
        }
    }
}

/// Density heatmaps of the target and the generated batch on one shared grid,
/// plus the diagnostics trace when the record has anything finite to show.
fn write_plots(cfg: &RunConfig, target: &Matrix, particles: &Matrix, record: &RunRecord) -> Result<()> {
    let spec = GridSpec::covering(target, 120, 120)?;
    let kt = metrics::kde(target, &spec, Bandwidth::Auto)?;
    let kg = metrics::kde(particles, &spec, Bandwidth::Auto)?;
    io::write_atomic(&cfg.out_dir.join("kde_target.svg"), &svg::heatmap_svg(&kt))?;
    io::write_atomic(&cfg.out_dir.join("kde_generated.svg"), &svg::heatmap_svg(&kg))?;
    if let Ok(trace) = svg::trace_svg(record) {
        io::write_atomic(&cfg.out_dir.join("trace.svg"), &trace)?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub points: PathBuf,
    pub spec: DatasetSpec,
    /// Target sample size; defaults to the particle count.
    pub n: Option<usize>,
    pub out: PathBuf,
}

/// Sampled-distance cap: exact transport cost is cubic in the batch size, so
/// both sides are subsampled to this many points before W2 and MMD^2.
const EVAL_CAP: usize = 512;

/// Compares a particle file against fresh target draws. For every metric the
/// report also carries a same-distribution baseline: the mean of the metric
/// over four independent pairs of target samples, which is the noise floor a
/// perfect transport would sit at.
pub fn run_eval(args: &EvalArgs) -> Result<()> {
    args.spec.validate()?;
    let particles = io::read_points(&args.points)?;
    if particles.cols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "evaluation expects 2D particles, got {} columns",
            particles.cols()
        )));
    }
    let nt = args.n.unwrap_or(particles.rows());
    if nt < 2 {
        return Err(Error::InvalidConfig(
            "target sample size must be at least 2".into(),
        ));
    }
    let seed = args.spec.seed;
    let target = datasets::sample(&args.spec, nt)?;

    // One grid covering both clouds keeps every density comparable.
    let grid = GridSpec::covering(&particles.vstack(&target)?, 100, 100)?;
    let (w2, mmd2, l1) = eval_metrics(&particles, &target, &grid, mix_seed(seed, 5))?;

    let mut base = [0.0f64; 3];
    for b in 0..4u64 {
        let t1 = datasets::sample(
            &DatasetSpec {
                seed: mix_seed(seed, 20 + 2 * b),
                ..args.spec
            },
            nt,
        )?;
        let t2 = datasets::sample(
            &DatasetSpec {
                seed: mix_seed(seed, 21 + 2 * b),
                ..args.spec
            },
            nt,
        )?;
        let (bw, bm, bl) = eval_metrics(&t1, &t2, &grid, mix_seed(seed, 30 + b))?;
        base[0] += bw / 4.0;
        base[1] += bm / 4.0;
        base[2] += bl / 4.0;
    }

    let mut csv = String::from("metric,value,baseline\n");
    csv.push_str(&format!("w2,{},{}\n", w2, base[0]));
    csv.push_str(&format!("mmd2,{},{}\n", mmd2, base[1]));
    csv.push_str(&format!("kde_l1,{},{}\n", l1, base[2]));
    io::write_atomic(&args.out, &csv)
}

fn eval_metrics(a: &Matrix, b: &Matrix, grid: &GridSpec, seed: u64) -> Result<(f64, f64, f64)> {
    // Exact transport wants equal cloud sizes, so one cap serves both sides.
    let cap = EVAL_CAP.min(a.rows()).min(b.rows());
    let asub = metrics::subsample(a, cap, mix_seed(seed, 1))?;
    let bsub = metrics::subsample(b, cap, mix_seed(seed, 2))?;
    let (w2, _) = metrics::wasserstein2_exact(&asub, &bsub)?;
    let kernel = Kernel::median_heuristic(&bsub)?;
    let mmd2 = metrics::mmd2_unbiased(&asub, &bsub, kernel)?;
    let ka = metrics::kde(a, grid, Bandwidth::Auto)?;
    let kb = metrics::kde(b, grid, Bandwidth::Auto)?;
    let l1 = metrics::grid_l1_distance(&ka, &kb)?;
    Ok((w2, mmd2, l1))
}

pub struct PlotArgs {
    pub points: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub density: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Renders whatever inputs were given (scatter.svg, trace.svg, heatmap.svg).
/// All inputs are parsed and rendered before anything is written, so a bad
/// input never leaves partial output behind.
pub fn run_plot(args: &PlotArgs) -> Result<()> {
    if args.points.is_none() && args.record.is_none() && args.density.is_none() {
        return Err(Error::InvalidConfig(
            "plot needs at least one of --points, --record, --density".into(),
        ));
    }
    let mut outputs: Vec<(PathBuf, String)> = Vec::new();
    if let Some(p) = &args.points {
        let batch = io::read_points(p)?;
        outputs.push((args.out_dir.join("scatter.svg"), svg::scatter_svg(&batch)?));
    }
    if let Some(p) = &args.record {
        let record = io::read_record(p)?;
        outputs.push((args.out_dir.join("trace.svg"), svg::trace_svg(&record)?));
    }
    if let Some(p) = &args.density {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let grid = DensityGrid::from_csv(&text)?;
        outputs.push((args.out_dir.join("heatmap.svg"), svg::heatmap_svg(&grid)));
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    for (path, contents) in &outputs {
        io::write_atomic(path, contents)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gemflow::datasets::DatasetId;

    #[test]
    fn exit_codes_partition_the_error_space() {
        assert_eq!(exit_code_for(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(exit_code_for(&Error::ShapeMismatch("x".into())), 2);
        assert_eq!(exit_code_for(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(exit_code_for(&Error::NumericFault("x".into())), 3);
        assert_eq!(exit_code_for(&Error::UndefinedRatio { atom: 0, q: 0.5 }), 3);
        assert_eq!(
            exit_code_for(&Error::Io {
                path: "p".into(),
                source: std::io::Error::other("x"),
            }),
            4
        );
        assert_eq!(
            exit_code_for(&Error::Parse {
                path: "p".into(),
                line: 3,
                msg: "x".into(),
            }),
            4
        );
    }

    #[test]
    fn checkpoint_scan_wants_the_full_triple() {
        let dir = tempfile::tempdir().unwrap();
        let touch = |name: &str| fs::write(dir.path().join(name), "x").unwrap();
        assert_eq!(newest_checkpoint(dir.path(), 100), None);
        touch("particles_10.csv");
        // Particle file alone does not count.
        assert_eq!(newest_checkpoint(dir.path(), 100), None);
        touch("net_10.json");
        assert_eq!(newest_checkpoint(dir.path(), 100), Some(10));
        touch("particles_50.csv");
        touch("net_50.json");
        assert_eq!(newest_checkpoint(dir.path(), 100), Some(50));
        // Checkpoints beyond the requested horizon are ignored.
        assert_eq!(newest_checkpoint(dir.path(), 20), Some(10));
        touch("particles_junk.csv");
        assert_eq!(newest_checkpoint(dir.path(), 100), Some(50));
    }

    #[test]
    fn plot_requires_an_input() {
        let args = PlotArgs {
            points: None,
            record: None,
            density: None,
            out_dir: PathBuf::from("unused"),
        };
        let err = run_plot(&args).unwrap_err();
        assert_eq!(exit_code_for(&err), 2);
    }

    #[test]
    fn eval_rejects_tiny_targets() {
        let dir = tempfile::tempdir().unwrap();
        let pts = dir.path().join("p.csv");
        fs::write(&pts, "x,y\n0,0\n1,1\n").unwrap();
        let args = EvalArgs {
            points: pts,
            spec: DatasetSpec::new(DatasetId::Moons, 0),
            n: Some(1),
            out: dir.path().join("out.csv"),
        };
        let err = run_eval(&args).unwrap_err();
        assert_eq!(exit_code_for(&err), 2);
    }
}
