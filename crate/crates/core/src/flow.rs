//! Forward-Euler particle transport with a re-fitted velocity field.
//!
//! Each iteration of the inner loop fits the ratio (or difference) network
//! for a few optimizer rounds on mini-batches, evaluates the induced
//! velocity field on every particle, and pushes the particles one Euler step
//! `x <- x + s v(x)`. The kernel estimator skips fitting entirely and uses
//! the closed-form mean-embedding field.
//!
//! Runs are segmentable: a segment covers `iteration_offset..iteration_offset
//! + iterations`, per-iteration randomness is derived from the absolute
//! iteration index, and the optimizer accumulator starts fresh at each
//! segment boundary. A segment's output (particles, network) therefore fully
//! determines the rest of the run, which is what makes checkpoint resumption
//! bitwise exact.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bregman::{
    lsdd_empirical_loss, ratio_fit_loss, DiffObjective, OutputMap, RatioFit, RatioObjective,
};
use crate::mat::Matrix;
use crate::metrics::{fit_diagnostics, mmd2_unbiased, subsample, wasserstein2_exact};
use crate::net::{network_init, Network, OptState};
use crate::velocity::{cap_rows, diff_velocity, mmd_velocity, ratio_velocity, FDivergence, Kernel};
use crate::{mix_seed, Error, Result};

/// Which fitting objective drives the velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Least-squares density-ratio fit.
    Lsdr,
    /// Logistic-regression density-ratio fit.
    Lr,
    /// Least-squares density-difference fit.
    Lsdd,
    /// Kernel mean-embedding field; no fitting.
    Mmd,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Lsdr,
        Estimator::Lr,
        Estimator::Lsdd,
        Estimator::Mmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Lsdr => "lsdr",
            Estimator::Lr => "lr",
            Estimator::Lsdd => "lsdd",
            Estimator::Mmd => "mmd",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown estimator '{}', expected lsdr|lr|lsdd|mmd",
                    s
                ))
            })
    }

    pub fn fits_a_network(self) -> bool {
        self != Estimator::Mmd
    }
}

/// Output map used by the ratio estimators: raw output for the least-squares
/// fit under the chi-squared generator (whose score handles any real value),
/// the clamped softplus everywhere else so `f''` stays defined.
pub fn output_map_for(estimator: Estimator, divergence: FDivergence) -> OutputMap {
    if estimator == Estimator::Lsdr && divergence == FDivergence::Chi2 {
        OutputMap::Identity
    } else {
        OutputMap::softplus_clamp_default()
    }
}

/// All knobs of one transport run (or one segment of it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// Euler step size `s`.
    pub step_size: f64,
    /// Number of Euler iterations in this segment.
    pub iterations: usize,
    /// Optimizer rounds per iteration (ignored by the kernel estimator).
    pub fit_rounds: usize,
    /// Weight of the squared-input-gradient penalty on the target batch.
    pub penalty_alpha: f64,
    /// Mini-batch size per fitting round, drawn with replacement.
    pub batch_size: usize,
    pub estimator: Estimator,
    /// Divergence generator; used by the ratio estimators only.
    pub divergence: FDivergence,
    pub learning_rate: f64,
    pub seed: u64,
    /// Record diagnostics whenever the completed-iteration count is a
    /// multiple of this.
    pub diag_every: usize,
    /// Per-particle velocity norm cap; `f64::INFINITY` disables it.
    pub v_max: f64,
    /// Reinitialize the ratio network at every iteration instead of warm
    /// starting from the previous one.
    pub reinit_net: bool,
    /// Absolute index of this segment's first iteration.
    pub iteration_offset: usize,
    /// Compute the exact-transport diagnostic column (subsampled, costly).
    pub diag_w2: bool,
    /// Compute the kernel-discrepancy diagnostic column.
    pub diag_mmd: bool,
}

impl FlowConfig {
    /// The configuration used by the bundled 2D experiments: step 0.005 for
    /// 20000 iterations, 5 fitting rounds per step on batches of 1000,
    /// learning rate 5e-4, no gradient penalty.
    pub fn standard(estimator: Estimator, divergence: FDivergence) -> FlowConfig {
        FlowConfig {
            step_size: 0.005,
            iterations: 20_000,
            fit_rounds: 5,
            penalty_alpha: 0.0,
            batch_size: 1000,
            estimator,
            divergence,
            learning_rate: 5e-4,
            seed: 0,
            diag_every: 100,
            v_max: 1e3,
            reinit_net: false,
            iteration_offset: 0,
            diag_w2: false,
            diag_mmd: true,
        }
    }

    pub fn validate(&self, particle_count: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.fit_rounds == 0 {
            return bad("fit_rounds must be at least 1".into());
        }
        if !(self.penalty_alpha.is_finite() && self.penalty_alpha >= 0.0) {
            return bad(format!(
                "penalty_alpha must be nonnegative, got {}",
                self.penalty_alpha
            ));
        }
        if self.batch_size == 0 || self.batch_size > particle_count {
            return bad(format!(
                "batch_size must be in 1..={} (particle count), got {}",
                particle_count, self.batch_size
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.diag_every == 0 {
            return bad("diag_every must be at least 1".into());
        }
        if !(self.v_max > 0.0) {
            return bad(format!("v_max must be positive, got {}", self.v_max));
        }
        self.divergence.validate()?;
        Ok(())
    }
}

/// One diagnostics row. Columns that were skipped (or do not apply to the
/// estimator) hold NaN markers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagRow {
    /// Completed-iteration count at which the row was taken (0 = initial
    /// state).
    pub iteration: usize,
    /// Penalty-free fitting loss of the current network on the full pools.
    pub loss: f64,
    /// Mean input-gradient norm of the raw network output over particles.
    pub grad_norm: f64,
    /// Exact quadratic transport distance to a target subsample.
    pub w2: f64,
    /// Unbiased squared kernel discrepancy to a target subsample.
    pub mmd: f64,
    /// Milliseconds since the segment started.
    pub wall_ms: f64,
}

/// Append-only, iteration-ordered diagnostics history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    rows: Vec<DiagRow>,
}

impl RunRecord {
    pub fn new() -> RunRecord {
        RunRecord::default()
    }

    pub fn push(&mut self, row: DiagRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(Error::InvalidArgument(format!(
                    "diagnostics must advance: {} after {}",
                    row.iteration, last.iteration
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &RunRecord) -> Result<()> {
        for row in &other.rows {
            self.push(*row)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[DiagRow] {
        &self.rows
    }

    pub fn last_iteration(&self) -> Option<usize> {
        self.rows.last().map(|r| r.iteration)
    }
}

/// A run that hit a numeric fault; the diagnostics gathered so far survive.
#[derive(Debug)]
pub struct FlowAborted {
    pub error: Error,
    pub record: RunRecord,
    /// Absolute iteration index at which the fault occurred.
    pub at_iteration: usize,
}

impl fmt::Display for FlowAborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "flow aborted at iteration {}: {}", self.at_iteration, self.error)
    }
}

impl std::error::Error for FlowAborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type FlowResult<T> = std::result::Result<T, Box<FlowAborted>>;

/// One Euler step: `out = particles + s * field`, rowwise.
pub fn euler_step(particles: &Matrix, field: &Matrix, s: f64) -> Result<Matrix> {
    if particles.rows() != field.rows() || particles.cols() != field.cols() {
        return Err(Error::ShapeMismatch(format!(
            "particles are {}x{}, field is {}x{}",
            particles.rows(),
            particles.cols(),
            field.rows(),
            field.cols()
        )));
    }
    if !s.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be finite, got {}", s)));
    }
    let mut out = particles.clone();
    for (o, v) in out.as_mut_slice().iter_mut().zip(field.as_slice()) {
        *o += s * v;
    }
    if !out.all_finite() {
        return Err(Error::NumericFault("particles left the finite range".into()));
    }
    Ok(out)
}

/// Euler integration under a closed-form field, used as a discretization
/// oracle in tests. The callback fills `v` with the velocity at one point.
pub fn integrate_analytic<F>(field: F, x0: &Matrix, s: f64, iterations: usize) -> Result<Matrix>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !s.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be finite, got {}", s)));
    }
    let mut x = x0.clone();
    let mut v = vec![0.0f64; x.cols()];
    for _ in 0..iterations {
        for i in 0..x.rows() {
            field(x.row(i), &mut v);
            for (xj, vj) in x.row_mut(i).iter_mut().zip(&v) {
                *xj += s * *vj;
            }
        }
        if !x.all_finite() {
            return Err(Error::NumericFault("analytic integration diverged".into()));
        }
    }
    Ok(x)
}

struct SegmentCtx<'a> {
    target: &'a Matrix,
    cfg: &'a FlowConfig,
    map: OutputMap,
    kernel: Kernel,
    started: Instant,
}

impl SegmentCtx<'_> {
    fn diagnose(&self, net: &Network, parts: &Matrix, completed: usize) -> Result<DiagRow> {
        let cfg = self.cfg;
        let (loss, grad_norm) = match cfg.estimator {
            Estimator::Mmd => (f64::NAN, f64::NAN),
            Estimator::Lsdd => {
                let diff = DiffObjective {
                    sample_count: cfg.batch_size,
                    seed: mix_seed(cfg.seed, completed as u64 ^ 0x6c73_6464),
                };
                let (loss, _) = lsdd_empirical_loss(net, self.target, parts, &diff)?;
                let (_, grads) = net.value_and_input_grad(parts)?;
                (loss, mean_row_norm(&grads))
            }
            Estimator::Lsdr | Estimator::Lr => {
                if self.map == OutputMap::Identity {
                    fit_diagnostics(net, self.target, parts)?
                } else {
                    let obj = RatioObjective {
                        fit: ratio_fit_kind(cfg.estimator),
                        penalty_alpha: 0.0,
                        output_map: self.map,
                    };
                    let (loss, _) = ratio_fit_loss(net, &obj, self.target, parts)?;
                    let (_, grads) = net.value_and_input_grad(parts)?;
                    (loss, mean_row_norm(&grads))
                }
            }
        };
        let sub = |m: &Matrix, tag: u64| {
            let n = 2048.min(m.rows());
            subsample(m, n, mix_seed(cfg.seed, completed as u64 ^ tag))
        };
        let w2 = if cfg.diag_w2 && parts.rows() >= 1 && self.target.rows() >= 1 {
            let n = 2048.min(parts.rows()).min(self.target.rows());
            let pa = subsample(parts, n, mix_seed(cfg.seed, completed as u64 ^ 0x7732_7061))?;
            let ta = subsample(self.target, n, mix_seed(cfg.seed, completed as u64 ^ 0x7732_7461))?;
            wasserstein2_exact(&pa, &ta)?.0
        } else {
            f64::NAN
        };
        let mmd = if cfg.diag_mmd && parts.rows() >= 2 && self.target.rows() >= 2 {
            let pa = sub(parts, 0x6d6d_7061)?;
            let ta = sub(self.target, 0x6d6d_7461)?;
            mmd2_unbiased(&pa, &ta, self.kernel)?
        } else {
            f64::NAN
        };
        Ok(DiagRow {
            iteration: completed,
            loss,
            grad_norm,
            w2,
            mmd,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn mean_row_norm(grads: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..grads.rows() {
        s += grads.row(i).iter().map(|g| g * g).sum::<f64>().sqrt();
    }
    s / grads.rows() as f64
}

fn ratio_fit_kind(estimator: Estimator) -> RatioFit {
    match estimator {
        Estimator::Lsdr => RatioFit::Lsdr,
        _ => RatioFit::Lr,
    }
}

fn draw_batch(pool: &Matrix, size: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..pool.rows())).collect();
    pool.gather(&idx)
}

/// Runs one segment of the transport: `cfg.iterations` Euler steps starting
/// from `particles`, warm-starting the fit from `net`. Returns the final
/// particles, the fitted network, and the diagnostics taken along the way.
/// A numeric fault aborts the segment and hands back the partial record.
pub fn inner_loop(
    particles: &Matrix,
    target: &Matrix,
    net: &Network,
    cfg: &FlowConfig,
) -> FlowResult<(Matrix, Network, RunRecord)> {
    let mut record = RunRecord::new();
    match run_segment(particles, target, net, cfg, &mut record) {
        Ok((parts, net)) => Ok((parts, net, record)),
        Err((error, at_iteration)) => Err(Box::new(FlowAborted {
            error,
            record,
            at_iteration,
        })),
    }
}

fn run_segment(
    particles: &Matrix,
    target: &Matrix,
    net: &Network,
    cfg: &FlowConfig,
    record: &mut RunRecord,
) -> std::result::Result<(Matrix, Network), (Error, usize)> {
    let start = cfg.iteration_offset;
    let fail = |e: Error| (e, start);
    cfg.validate(particles.rows()).map_err(fail)?;
    if particles.cols() != target.cols() {
        return Err(fail(Error::ShapeMismatch(format!(
            "particles are {} wide, target is {}",
            particles.cols(),
            target.cols()
        ))));
    }
    if cfg.estimator.fits_a_network() && net.input_width() != particles.cols() {
        return Err(fail(Error::ShapeMismatch(format!(
            "network expects {} inputs, particles are {} wide",
            net.input_width(),
            particles.cols()
        ))));
    }
    if !particles.all_finite() || !target.all_finite() {
        return Err(fail(Error::NumericFault("non-finite input batch".into())));
    }
    let ctx = SegmentCtx {
        target,
        cfg,
        map: output_map_for(cfg.estimator, cfg.divergence),
        kernel: Kernel::median_heuristic(target).map_err(fail)?,
        started: Instant::now(),
    };
    let mut parts = particles.clone();
    let mut net = net.clone();
    if start == 0 {
        let row = ctx.diagnose(&net, &parts, 0).map_err(fail)?;
        record.push(row).map_err(fail)?;
    }
    let mut opt = OptState::new(&net, cfg.learning_rate).map_err(fail)?;
    for k in 0..cfg.iterations {
        let a = start + k;
        let fail = |e: Error| (e, a);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, a as u64));
        if cfg.estimator.fits_a_network() {
            if cfg.reinit_net {
                net = network_init(net.widths(), rng.random()).map_err(fail)?;
                opt = OptState::new(&net, cfg.learning_rate).map_err(fail)?;
            }
            for _ in 0..cfg.fit_rounds {
                let xb = draw_batch(target, cfg.batch_size, &mut rng);
                let yb = draw_batch(&parts, cfg.batch_size, &mut rng);
                let (loss, grads) = match cfg.estimator {
                    Estimator::Lsdr | Estimator::Lr => {
                        let obj = RatioObjective {
                            fit: ratio_fit_kind(cfg.estimator),
                            penalty_alpha: cfg.penalty_alpha,
                            output_map: ctx.map,
                        };
                        ratio_fit_loss(&net, &obj, &xb, &yb).map_err(fail)?
                    }
                    Estimator::Lsdd => {
                        let diff = DiffObjective {
                            sample_count: cfg.batch_size,
                            seed: rng.random(),
                        };
                        lsdd_empirical_loss(&net, &xb, &yb, &diff).map_err(fail)?
                    }
                    Estimator::Mmd => unreachable!(),
                };
                if !loss.is_finite() {
                    return Err(fail(Error::NumericFault(format!(
                        "fitting loss became {} at iteration {}",
                        loss, a
                    ))));
                }
                opt.step(&mut net, &grads).map_err(fail)?;
            }
        }
        let mut field = match cfg.estimator {
            Estimator::Lsdr | Estimator::Lr => {
                ratio_velocity(&net, cfg.divergence, ctx.map, &parts).map_err(fail)?
            }
            Estimator::Lsdd => diff_velocity(&net, &parts).map_err(fail)?,
            Estimator::Mmd => mmd_velocity(ctx.kernel, target, &parts, &parts).map_err(fail)?,
        };
        cap_rows(&mut field, cfg.v_max);
        parts = euler_step(&parts, &field, cfg.step_size).map_err(fail)?;
        let completed = a + 1;
        if completed % cfg.diag_every == 0 {
            let row = ctx.diagnose(&net, &parts, completed).map_err(fail)?;
            record.push(row).map_err(fail)?;
        }
    }
    Ok((parts, net))
}

/// Mean squared error of the generator on a latent/target pair set.
pub fn generator_mse(gen: &Network, latents: &Matrix, targets: &Matrix) -> Result<f64> {
    let out = gen.forward(latents)?;
    if out.rows() != targets.rows() || out.cols() != targets.cols() {
        return Err(Error::ShapeMismatch(format!(
            "generator emits {}x{}, targets are {}x{}",
            out.rows(),
            out.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let mut s = 0.0;
    for (a, b) in out.as_slice().iter().zip(targets.as_slice()) {
        let d = a - b;
        s += d * d;
    }
    Ok(s / targets.rows() as f64)
}

/// Full-batch RMSProp regression of the generator onto `(latents, targets)`
/// pairs under mean squared error.
pub fn fit_generator(
    gen: &Network,
    latents: &Matrix,
    targets: &Matrix,
    epochs: usize,
    lr: f64,
) -> Result<Network> {
    if latents.rows() != targets.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} latents vs {} targets",
            latents.rows(),
            targets.rows()
        )));
    }
    if gen.input_width() != latents.cols() || gen.output_width() != targets.cols() {
        return Err(Error::ShapeMismatch(format!(
            "generator maps {}->{}, data is {}->{}",
            gen.input_width(),
            gen.output_width(),
            latents.cols(),
            targets.cols()
        )));
    }
    let mut net = gen.clone();
    let mut opt = OptState::new(&net, lr)?;
    let n = latents.rows() as f64;
    for _ in 0..epochs {
        let out = net.forward(latents)?;
        let mut upstream = Matrix::zeros(out.rows(), out.cols());
        for (u, (o, t)) in upstream
            .as_mut_slice()
            .iter_mut()
            .zip(out.as_slice().iter().zip(targets.as_slice()))
        {
            *u = 2.0 * (o - t) / n;
        }
        let (grads, _) = net.backward(latents, &upstream)?;
        opt.step(&mut net, &grads)?;
    }
    Ok(net)
}

/// Outer-loop settings: how many generator refits, how many transport
/// iterations feed each refit, and the regression schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterConfig {
    pub rounds: usize,
    /// Transport iterations per round (0 refits the generator on its own
    /// output).
    pub inner_per_outer: usize,
    pub gen_epochs: usize,
    pub gen_lr: f64,
    /// Latent draws per round.
    pub latent_count: usize,
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("outer rounds must be at least 1".into()));
        }
        if self.gen_epochs == 0 {
            return Err(Error::InvalidConfig("gen_epochs must be at least 1".into()));
        }
        if !(self.gen_lr.is_finite() && self.gen_lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gen_lr must be positive, got {}",
                self.gen_lr
            )));
        }
        if self.latent_count == 0 {
            return Err(Error::InvalidConfig("latent_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Alternates transport and generator regression: per round, draw latents,
/// push the generated particles through `inner_per_outer` transport
/// iterations, then refit the generator to map the latents onto the
/// transported points. The ratio network warm-starts across rounds.
pub fn outer_loop<F>(
    gen: &Network,
    latent_sampler: F,
    target: &Matrix,
    cfg: &FlowConfig,
    outer: &OuterConfig,
) -> FlowResult<(Network, RunRecord)>
where
    F: Fn(usize, u64) -> Result<Matrix>,
{
    let mut record = RunRecord::new();
    let abort = |error: Error, at: usize, record: &RunRecord| {
        Box::new(FlowAborted {
            error,
            record: record.clone(),
            at_iteration: at,
        })
    };
    outer.validate().map_err(|e| abort(e, 0, &record))?;
    let mut gen = gen.clone();
    let mut ratio_net = network_init(
        &crate::net::default_ratio_widths(target.cols()),
        mix_seed(cfg.seed, 0x6f75_7465),
    )
    .map_err(|e| abort(e, 0, &record))?;
    for round in 0..outer.rounds {
        let offset = cfg.iteration_offset + round * outer.inner_per_outer;
        let latents = latent_sampler(
            outer.latent_count,
            mix_seed(cfg.seed ^ 0x6c61_7425, round as u64),
        )
        .map_err(|e| abort(e, offset, &record))?;
        let generated = gen.forward(&latents).map_err(|e| abort(e, offset, &record))?;
        let transported = if outer.inner_per_outer == 0 {
            generated
        } else {
            let mut seg_cfg = *cfg;
            seg_cfg.iterations = outer.inner_per_outer;
            seg_cfg.iteration_offset = offset;
            let (parts, net, seg_record) = inner_loop(&generated, target, &ratio_net, &seg_cfg)
                .map_err(|mut e| {
                    let mut merged = record.clone();
                    let _ = merged.extend(&e.record);
                    e.record = merged;
                    e
                })?;
            ratio_net = net;
            record
                .extend(&seg_record)
                .map_err(|e| abort(e, offset, &record))?;
            parts
        };
        gen = fit_generator(&gen, &latents, &transported, outer.gen_epochs, outer.gen_lr)
            .map_err(|e| abort(e, offset, &record))?;
    }
    Ok((gen, record))
}
