//! Run diagnostics: exact quadratic Wasserstein distance between equal-size
//! point sets, the unbiased MMD^2 U-statistic, kernel density estimation on
//! rectangular grids, and the fitting-loss/gradient-norm pair tracked during
//! flow runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::mat::Matrix;
use crate::net::Network;
use crate::velocity::Kernel;
use crate::{Error, Result};

/// Largest point-set size accepted by the exact assignment solver.
pub const W2_MAX_POINTS: usize = 4096;

/// An optimal pairing between the rows of two equal-size batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `assignment[i] = j` pairs row `i` of the first batch with row `j` of
    /// the second; a permutation of `0..n`.
    pub assignment: Vec<usize>,
    /// `sum_i ||a_i - b_{assignment[i]}||^2`, summed in sorted order so the
    /// total is independent of which argument came first.
    pub total_squared_cost: f64,
}

#[inline]
fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Total squared cost of a pairing, accumulated smallest-first. Sorting
/// fixes the summation order, which makes the reported cost identical for a
/// plan and its inverse.
fn sorted_pair_total(a: &Matrix, b: &Matrix, assignment: &[usize]) -> f64 {
    let mut costs: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| sqdist(a.row(i), b.row(j)))
        .collect();
    costs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    costs.iter().sum()
}

/// Shortest-augmenting-path assignment with dual potentials. Returns the
/// column-to-row map `p` (`p[j]` = row assigned to column `j`) plus the dual
/// variables, so callers can audit complementary slackness.
pub(crate) fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    const NONE: usize = usize::MAX;
    let virt = n;
    let mut p = vec![NONE; n + 1];
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![virt; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 0..n {
        p[virt] = i;
        let mut j0 = virt;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[i0 * n..(i0 + 1) * n];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 0..n {
                if !used[j] {
                    let cur = row[j] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == NONE {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == virt {
                break;
            }
        }
    }
    p.truncate(n);
    v.truncate(n);
    (p, u, v)
}

/// Exact quadratic Wasserstein distance between two uniform empirical
/// measures of equal size: `W2 = sqrt(min_pi (1/n) sum_i ||a_i - b_pi(i)||^2)`
/// over permutations, solved as an assignment problem.
pub fn wasserstein2_exact(a: &Matrix, b: &Matrix) -> Result<(f64, TransportPlan)> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "point dimensions differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() != b.rows() {
        return Err(Error::InvalidArgument(format!(
            "batches must have equal size (got {} vs {}); subsample upstream",
            a.rows(),
            b.rows()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batches".into()));
    }
    if n > W2_MAX_POINTS {
        return Err(Error::InvalidArgument(format!(
            "exact solver accepts up to {} points, got {}",
            W2_MAX_POINTS, n
        )));
    }
    let mut cost = vec![0.0f64; n * n];
    cost.par_chunks_mut(n)
        .zip(a.as_slice().par_chunks(a.cols()))
        .for_each(|(row, ai)| {
            for (j, c) in row.iter_mut().enumerate() {
                *c = sqdist(ai, b.row(j));
            }
        });
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericFault("non-finite transport cost".into()));
    }
    let (p, _, _) = solve_assignment(&cost, n);
    let mut assignment = vec![0usize; n];
    for (j, &i) in p.iter().enumerate() {
        assignment[i] = j;
    }
    let total = sorted_pair_total(a, b, &assignment);
    let dist = (total / n as f64).sqrt();
    Ok((
        dist,
        TransportPlan {
            assignment,
            total_squared_cost: total,
        },
    ))
}

/// Unbiased U-statistic estimate of the squared kernel mean discrepancy:
/// within-batch terms skip the diagonal, the cross term uses all pairs.
pub fn mmd2_unbiased(a: &Matrix, b: &Matrix, kernel: Kernel) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "point dimensions differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::InvalidArgument(
            "unbiased estimator needs at least two points per batch".into(),
        ));
    }
    let within = |m: &Matrix| -> f64 {
        let partials: Vec<f64> = (0..m.rows())
            .into_par_iter()
            .map(|i| {
                let xi = m.row(i);
                let mut s = 0.0;
                for (j, xj) in m.iter_rows().enumerate() {
                    if j != i {
                        s += kernel.eval(xi, xj);
                    }
                }
                s
            })
            .collect();
        partials.iter().sum::<f64>() / (m.rows() * (m.rows() - 1)) as f64
    };
    let cross_partials: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let xi = a.row(i);
            b.iter_rows().map(|z| kernel.eval(xi, z)).sum::<f64>()
        })
        .collect();
    let cross = cross_partials.iter().sum::<f64>() / (a.rows() * b.rows()) as f64;
    let est = within(a) + within(b) - 2.0 * cross;
    if !est.is_finite() {
        return Err(Error::NumericFault("non-finite discrepancy estimate".into()));
    }
    Ok(est)
}

/// Rectangular evaluation grid for density estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_axis = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
        if !ok_axis(self.x_range) || !ok_axis(self.y_range) {
            return Err(Error::InvalidConfig(format!(
                "grid ranges must be finite and increasing, got x={:?} y={:?}",
                self.x_range, self.y_range
            )));
        }
        if self.nx < 2 || self.ny < 2 || self.nx > 4096 || self.ny > 4096 {
            return Err(Error::InvalidConfig(format!(
                "grid resolution must be in [2, 4096] per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        Ok(())
    }

    /// Grid over the batch's bounding box inflated by 10% per axis.
    pub fn covering(points: &Matrix, nx: usize, ny: usize) -> Result<GridSpec> {
        if points.cols() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "grids cover 2D batches, got {} columns",
                points.cols()
            )));
        }
        let (lo, hi) = points.bounding_box(0.1);
        let spec = GridSpec {
            x_range: (lo[0], hi[0]),
            y_range: (lo[1], hi[1]),
            nx,
            ny,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.nx as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width() * self.cell_height()
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        self.x_range.0 + (ix as f64 + 0.5) * self.cell_width()
    }

    pub fn y_center(&self, iy: usize) -> f64 {
        self.y_range.0 + (iy as f64 + 0.5) * self.cell_height()
    }
}

/// Nonnegative density values on a [`GridSpec`], normalized so the Riemann
/// sum over cells is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    values: Vec<f64>,
}

impl DensityGrid {
    /// Cell values in row-major order (`iy * nx + ix`).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.spec.nx + ix]
    }

    pub fn riemann_sum(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_area()
    }

    /// Serializes as a metadata comment line followed by `ny` rows of `nx`
    /// comma-separated values. Floats are written in shortest round-trip
    /// form, so parsing back reproduces the values bit for bit.
    pub fn to_csv(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "# gemflow-grid x0={} x1={} y0={} y1={} nx={} ny={}\n",
            s.x_range.0, s.x_range.1, s.y_range.0, s.y_range.1, s.nx, s.ny
        );
        for iy in 0..s.ny {
            let row = &self.values[iy * s.nx..(iy + 1) * s.nx];
            let line: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<DensityGrid> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: "<grid>".into(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty grid file".into()))?;
        let tag = "# gemflow-grid ";
        let rest = header
            .strip_prefix(tag)
            .ok_or_else(|| parse_err(1, format!("expected '{}' metadata line", tag.trim())))?;
        let mut fields = std::collections::HashMap::new();
        for part in rest.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("bad metadata field '{}'", part)))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let getf = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| parse_err(1, format!("missing metadata field '{}'", k)))?
                .parse::<f64>()
                .map_err(|e| parse_err(1, format!("bad {}: {}", k, e)))
        };
        let getn = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .ok_or_else(|| parse_err(1, format!("missing metadata field '{}'", k)))?
                .parse::<usize>()
                .map_err(|e| parse_err(1, format!("bad {}: {}", k, e)))
        };
        let spec = GridSpec {
            x_range: (getf("x0")?, getf("x1")?),
            y_range: (getf("y0")?, getf("y1")?),
            nx: getn("nx")?,
            ny: getn("ny")?,
        };
        spec.validate()?;
        let mut values = Vec::with_capacity(spec.nx * spec.ny);
        let mut line_no = 1;
        for line in lines {
            line_no += 1;
            let mut count = 0;
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("bad value '{}': {}", tok, e)))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(parse_err(line_no, format!("negative or non-finite cell {}", v)));
                }
                values.push(v);
                count += 1;
            }
            if count != spec.nx {
                return Err(parse_err(
                    line_no,
                    format!("expected {} cells per row, got {}", spec.nx, count),
                ));
            }
        }
        if values.len() != spec.nx * spec.ny {
            return Err(parse_err(
                line_no,
                format!(
                    "expected {} rows of cells, got {}",
                    spec.ny,
                    values.len() / spec.nx
                ),
            ));
        }
        Ok(DensityGrid { spec, values })
    }
}

/// Bandwidth policy for [`kde`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Scott's rule per axis: `n^(-1/6) * sigma_hat`.
    Auto,
    /// One fixed bandwidth for both axes.
    Fixed(f64),
}

/// Gaussian-kernel density estimate of a 2D batch on a grid, normalized to
/// integrate to 1 over the grid. Kernels are truncated five bandwidths out;
/// the lost mass is restored by the final normalization.
pub fn kde(points: &Matrix, spec: &GridSpec, bandwidth: Bandwidth) -> Result<DensityGrid> {
    spec.validate()?;
    if points.cols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "density estimation expects 2D points, got {} columns",
            points.cols()
        )));
    }
    if points.rows() == 0 {
        return Err(Error::InvalidArgument("empty point batch".into()));
    }
    if !points.all_finite() {
        return Err(Error::NumericFault("non-finite points".into()));
    }
    let (hx, hy) = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bandwidth must be positive, got {}",
                    h
                )));
            }
            (h, h)
        }
        Bandwidth::Auto => {
            let stds = points.col_stds();
            let factor = (points.rows() as f64).powf(-1.0 / 6.0);
            let hx = factor * stds[0];
            let hy = factor * stds[1];
            if !(hx > 0.0 && hy > 0.0) {
                return Err(Error::InvalidArgument(
                    "auto bandwidth needs spread in both coordinates".into(),
                ));
            }
            (hx, hy)
        }
    };
    let dx = spec.cell_width();
    let dy = spec.cell_height();
    let mut values = vec![0.0f64; spec.nx * spec.ny];
    let cut = 5.0;
    for row in points.iter_rows() {
        let (px, py) = (row[0], row[1]);
        let ix_lo = (((px - cut * hx) - spec.x_range.0) / dx).floor().max(0.0) as usize;
        let ix_hi = ((((px + cut * hx) - spec.x_range.0) / dx).ceil() as isize)
            .clamp(0, spec.nx as isize) as usize;
        let iy_lo = (((py - cut * hy) - spec.y_range.0) / dy).floor().max(0.0) as usize;
        let iy_hi = ((((py + cut * hy) - spec.y_range.0) / dy).ceil() as isize)
            .clamp(0, spec.ny as isize) as usize;
        for iy in iy_lo..iy_hi {
            let gy = (spec.y_center(iy) - py) / hy;
            let ky = (-0.5 * gy * gy).exp();
            let base = iy * spec.nx;
            for ix in ix_lo..ix_hi {
                let gx = (spec.x_center(ix) - px) / hx;
                values[base + ix] += ky * (-0.5 * gx * gx).exp();
            }
        }
    }
    let total: f64 = values.iter().sum::<f64>() * dx * dy;
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidArgument(
            "no density mass falls on the grid".into(),
        ));
    }
    for v in &mut values {
        *v /= total;
    }
    Ok(DensityGrid { spec: *spec, values })
}

/// `sum |a - b| * cell_area` over two grids with identical specs.
pub fn grid_l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::InvalidArgument(
            "grids must share the same spec".into(),
        ));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        * a.spec.cell_area())
}

/// The two convergence diagnostics tracked per flow iteration: the
/// penalty-free least-squares ratio loss on (target, particles) and the mean
/// input-gradient norm of the network over the particles.
pub fn fit_diagnostics(
    net: &Network,
    target: &Matrix,
    particles: &Matrix,
) -> Result<(f64, f64)> {
    let r_target = net.forward(target)?;
    let r_particles = net.forward(particles)?;
    let mut sq = 0.0;
    for v in r_target.as_slice() {
        sq += v * v;
    }
    let mut lin = 0.0;
    for v in r_particles.as_slice() {
        lin += v;
    }
    let loss = sq / target.rows() as f64 - 2.0 * lin / particles.rows() as f64;
    let (_, grads) = net.value_and_input_grad(particles)?;
    let mut norm_sum = 0.0;
    for i in 0..grads.rows() {
        norm_sum += sqdist(grads.row(i), &vec![0.0; grads.cols()]).sqrt();
    }
    let mean_grad = norm_sum / particles.rows() as f64;
    if !(loss.is_finite() && mean_grad.is_finite()) {
        return Err(Error::NumericFault("non-finite diagnostics".into()));
    }
    Ok((loss, mean_grad))
}

/// Draws `n` distinct rows (a deterministic partial shuffle), preserving the
/// drawn order.
pub fn subsample(batch: &Matrix, n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 || n > batch.rows() {
        return Err(Error::InvalidArgument(format!(
            "subsample size {} out of range 1..={}",
            n,
            batch.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..batch.rows()).collect();
    for k in 0..n {
        let pick = rng.random_range(k..idx.len());
        idx.swap(k, pick);
    }
    idx.truncate(n);
    Ok(batch.gather(&idx))
}
