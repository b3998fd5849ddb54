//! Velocity fields that move particles down a divergence between the current
//! particle distribution `q` and the target `p`.
//!
//! For an f-divergence energy the field at a particle is
//! `v(x) = -f''(r(x)) grad r(x)` with `r = q/p`; the fitted surrogate
//! replaces `r` by a mapped network output. For the squared-L2 difference
//! energy the field is `v(x) = -2 grad d(x)` with `d = q - p`. A kernel
//! mean-embedding field needs no fitting:
//! `v(x) = mean_z~target grad_x K(x, z) - mean_z~current grad_x K(x, z)`.
//!
//! All fields are evaluated row-parallel; rows are independent, so results
//! are bitwise identical for any thread count.

use rayon::prelude::*;

use crate::bregman::OutputMap;
use crate::mat::Matrix;
use crate::net::{dot, Network};
use crate::{Error, Result};

/// Convex generators `f` with `f(1) = 0`, one per supported divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FDivergence {
    /// Pearson chi-squared: `f(u) = (u - 1)^2`.
    Chi2,
    /// Kullback-Leibler: `f(u) = u ln u`.
    Kl,
    /// Jensen-Shannon (up to the customary factor):
    /// `f(u) = u ln u - (u + 1) ln((u + 1)/2)`.
    Js,
    /// Logistic ("log D"): `f(u) = ln((1 + u) / (2u))`.
    LogD,
}

impl FDivergence {
    pub const ALL: [FDivergence; 4] = [
        FDivergence::Chi2,
        FDivergence::Kl,
        FDivergence::Js,
        FDivergence::LogD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FDivergence::Chi2 => "chi2",
            FDivergence::Kl => "kl",
            FDivergence::Js => "js",
            FDivergence::LogD => "logd",
        }
    }

    pub fn parse(s: &str) -> Result<FDivergence> {
        match s {
            "chi2" => Ok(FDivergence::Chi2),
            "kl" => Ok(FDivergence::Kl),
            "js" => Ok(FDivergence::Js),
            "logd" => Ok(FDivergence::LogD),
            other => Err(Error::InvalidConfig(format!(
                "unknown divergence '{}', expected chi2|kl|js|logd",
                other
            ))),
        }
    }

    pub fn f(self, u: f64) -> Result<f64> {
        check_domain(u)?;
        Ok(match self {
            FDivergence::Chi2 => (u - 1.0) * (u - 1.0),
            FDivergence::Kl => u * u.ln(),
            FDivergence::Js => u * u.ln() - (u + 1.0) * ((u + 1.0) / 2.0).ln(),
            FDivergence::LogD => ((1.0 + u) / (2.0 * u)).ln(),
        })
    }

    pub fn f_prime(self, u: f64) -> Result<f64> {
        check_domain(u)?;
        Ok(match self {
            FDivergence::Chi2 => 2.0 * (u - 1.0),
            FDivergence::Kl => u.ln() + 1.0,
            FDivergence::Js => (2.0 * u / (u + 1.0)).ln(),
            FDivergence::LogD => -1.0 / (u * (1.0 + u)),
        })
    }

    /// Enforces a sanity contract on the generator: `f(1) = 0` to 1e-12 and
    /// strict convexity (`f'' > 0`) across the clamp domain.
    pub fn validate(self) -> Result<()> {
        let at_one = self.f(1.0)?;
        if at_one.abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "divergence {} has f(1) = {}, expected 0",
                self.name(),
                at_one
            )));
        }
        let mut u = crate::bregman::RATIO_CLAMP.0;
        while u <= crate::bregman::RATIO_CLAMP.1 {
            if f_second(self, u)? <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "divergence {} is not strictly convex at u = {}",
                    self.name(),
                    u
                )));
            }
            u *= 1.5;
        }
        Ok(())
    }
}

#[inline]
fn check_domain(u: f64) -> Result<()> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "f-divergence generators are defined on u > 0, got {}",
            u
        )));
    }
    Ok(())
}

/// Second derivative of the generator at `u`. Domain error for `u <= 0`.
pub fn f_second(div: FDivergence, u: f64) -> Result<f64> {
    check_domain(u)?;
    Ok(match div {
        FDivergence::Chi2 => 2.0,
        FDivergence::Kl => 1.0 / u,
        FDivergence::Js => 1.0 / (u * (u + 1.0)),
        FDivergence::LogD => 1.0 / (u * u) - 1.0 / ((1.0 + u) * (1.0 + u)),
    })
}

/// Isotropic Gaussian kernel `K(x, z) = exp(-||x - z||^2 / (2 h^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    bandwidth: f64,
}

impl Kernel {
    pub fn new(bandwidth: f64) -> Result<Kernel> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {}",
                bandwidth
            )));
        }
        Ok(Kernel { bandwidth })
    }

    pub fn bandwidth(self) -> f64 {
        self.bandwidth
    }

    /// Median pairwise distance of (a deterministic subsample of) the batch.
    /// At most 1024 points enter the computation, taken at a fixed stride, so
    /// the heuristic is cheap and reproducible at any pool size.
    pub fn median_heuristic(points: &Matrix) -> Result<Kernel> {
        if points.rows() < 2 {
            return Err(Error::InvalidArgument(
                "median heuristic needs at least two points".into(),
            ));
        }
        let cap = 1024.min(points.rows());
        let stride = points.rows() / cap;
        let idx: Vec<usize> = (0..cap).map(|k| k * stride).collect();
        let mut dists = Vec::with_capacity(cap * (cap - 1) / 2);
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let d = euclid(points.row(i), points.row(j));
                if d > 0.0 {
                    dists.push(d);
                }
            }
        }
        if dists.is_empty() {
            return Err(Error::InvalidArgument(
                "median heuristic is degenerate: all points coincide".into(),
            ));
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Kernel::new(dists[dists.len() / 2])
    }

    #[inline]
    pub fn eval(self, x: &[f64], z: &[f64]) -> f64 {
        let mut s = 0.0;
        for (a, b) in x.iter().zip(z) {
            let d = a - b;
            s += d * d;
        }
        (-s / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    /// `grad_x K(x, z) = -(x - z)/h^2 * K(x, z)`, accumulated into `out`
    /// with weight `w`.
    #[inline]
    fn grad_accum(self, x: &[f64], z: &[f64], w: f64, out: &mut [f64]) {
        let k = self.eval(x, z);
        let c = w * k / (self.bandwidth * self.bandwidth);
        for ((o, a), b) in out.iter_mut().zip(x).zip(z) {
            *o -= c * (a - b);
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// `grad_x K(x, z)` as a fresh vector.
pub fn kernel_grad(kernel: Kernel, x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernel.grad_accum(x, z, 1.0, &mut out);
    out
}

/// Ratio-fit velocity `v(x) = -f''(R(x)) grad R(x)`, where `R` is the
/// network output passed through the fitting objective's positivity map.
/// With the chi-squared generator and the identity map this reduces exactly
/// to `-2 grad_x` of the raw output.
pub fn ratio_velocity(
    net: &Network,
    div: FDivergence,
    map: OutputMap,
    points: &Matrix,
) -> Result<Matrix> {
    let (vals, mut grads) = net.value_and_input_grad(points)?;
    for (i, z) in vals.iter().enumerate() {
        let (r, dr) = map.apply_with_slope(*z);
        // The chi-squared factor is the constant 2 whatever the ratio value,
        // so that branch never inspects `r` and tolerates raw outputs.
        let fpp = match div {
            FDivergence::Chi2 => 2.0,
            _ => f_second(div, r).map_err(|_| {
                Error::NumericFault(format!(
                    "mapped ratio {} left the generator domain at row {}",
                    r, i
                ))
            })?,
        };
        let c = -fpp * dr;
        for g in grads.row_mut(i) {
            *g *= c;
        }
    }
    if !grads.all_finite() {
        return Err(Error::NumericFault("non-finite ratio velocity".into()));
    }
    Ok(grads)
}

/// Difference-fit velocity `v(x) = -2 grad D(x)` on the raw output.
pub fn diff_velocity(net: &Network, points: &Matrix) -> Result<Matrix> {
    let (_, mut grads) = net.value_and_input_grad(points)?;
    for g in grads.as_mut_slice() {
        *g *= -2.0;
    }
    if !grads.all_finite() {
        return Err(Error::NumericFault("non-finite difference velocity".into()));
    }
    Ok(grads)
}

/// Kernel mean-embedding velocity
/// `v(x) = mean_{z in target} grad_x K(x, z) - mean_{z in current} grad_x K(x, z)`.
/// Exactly zero when `target` and `current` are the same multiset.
pub fn mmd_velocity(
    kernel: Kernel,
    target: &Matrix,
    current: &Matrix,
    points: &Matrix,
) -> Result<Matrix> {
    if target.cols() != points.cols() || current.cols() != points.cols() {
        return Err(Error::ShapeMismatch(format!(
            "pools are {} and {} wide, points are {}",
            target.cols(),
            current.cols(),
            points.cols()
        )));
    }
    if target.rows() == 0 || current.rows() == 0 {
        return Err(Error::InvalidArgument("empty pool".into()));
    }
    let m = points.cols();
    let mut out = Matrix::zeros(points.rows(), m);
    let wt = 1.0 / target.rows() as f64;
    let wc = 1.0 / current.rows() as f64;
    out.as_mut_slice()
        .par_chunks_mut(m)
        .zip(points.as_slice().par_chunks(m))
        .for_each(|(row, x)| {
            let mut pull = vec![0.0; m];
            for z in target.iter_rows() {
                kernel.grad_accum(x, z, wt, &mut pull);
            }
            let mut push = vec![0.0; m];
            for z in current.iter_rows() {
                kernel.grad_accum(x, z, wc, &mut push);
            }
            for (o, (a, b)) in row.iter_mut().zip(pull.iter().zip(&push)) {
                *o = a - b;
            }
        });
    if !out.all_finite() {
        return Err(Error::NumericFault("non-finite kernel velocity".into()));
    }
    Ok(out)
}

/// Caps each row's Euclidean norm at `v_max` (rescaling, direction kept).
/// An infinite cap is a no-op; rows already under the cap are untouched
/// bitwise.
pub fn cap_rows(field: &mut Matrix, v_max: f64) {
    if !v_max.is_finite() {
        return;
    }
    for i in 0..field.rows() {
        let row = field.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm > v_max {
            let c = v_max / norm;
            for v in row {
                *v *= c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::network_init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, m, data).unwrap()
    }

    #[test]
    fn generators_vanish_at_one() {
        for div in FDivergence::ALL {
            assert!(div.f(1.0).unwrap().abs() <= 1e-12, "{}", div.name());
            div.validate().unwrap();
        }
    }

    #[test]
    fn second_derivatives_hand_values() {
        assert_eq!(f_second(FDivergence::Chi2, 0.37).unwrap(), 2.0);
        assert!((f_second(FDivergence::Kl, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((f_second(FDivergence::Js, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((f_second(FDivergence::LogD, 1.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn second_derivative_matches_difference_quotient_of_f_prime() {
        let h = 1e-6;
        for div in FDivergence::ALL {
            for u in [0.05, 0.5, 1.0, 3.0, 40.0] {
                let fd = (div.f_prime(u + h).unwrap() - div.f_prime(u - h).unwrap()) / (2.0 * h);
                let an = f_second(div, u).unwrap();
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "{} at {}: {} vs {}",
                    div.name(),
                    u,
                    an,
                    fd
                );
            }
        }
    }

    #[test]
    fn domain_errors_below_zero() {
        for div in FDivergence::ALL {
            assert!(f_second(div, 0.0).is_err());
            assert!(f_second(div, -1.0).is_err());
            assert!(div.f(-0.5).is_err());
        }
    }

    #[test]
    fn chi2_velocity_is_minus_two_input_gradient_bitwise() {
        let net = network_init(&[2, 32, 32, 1], 5).unwrap();
        let pts = random_batch(64, 2, 6);
        let v = ratio_velocity(&net, FDivergence::Chi2, OutputMap::Identity, &pts).unwrap();
        let g = net.input_gradient(&pts).unwrap();
        for (a, b) in v.as_slice().iter().zip(g.as_slice()) {
            assert_eq!(a.to_bits(), (-2.0 * b).to_bits());
        }
    }

    #[test]
    fn kl_velocity_on_positive_linear_net_is_grad_log() {
        // R(x) = w.x + b with b keeping R positive on the batch:
        // v = -grad R / R = -w / R, computed here with scalar arithmetic.
        let mut net = network_init(&[2, 1], 0).unwrap();
        let w = [0.4, -0.3];
        net.weights_mut(0).copy_from_slice(&w);
        net.biases_mut(0)[0] = 2.0;
        let pts = random_batch(20, 2, 7);
        let v = ratio_velocity(&net, FDivergence::Kl, OutputMap::Identity, &pts).unwrap();
        for i in 0..pts.rows() {
            let r = w[0] * pts.get(i, 0) + w[1] * pts.get(i, 1) + 2.0;
            for j in 0..2 {
                let expect = -w[j] / r;
                assert!(
                    (v.get(i, j) - expect).abs() < 1e-12,
                    "row {}: {} vs {}",
                    i,
                    v.get(i, j),
                    expect
                );
            }
        }
    }

    #[test]
    fn ratio_velocity_errors_when_raw_output_leaves_domain() {
        // Identity map with a KL generator and a negative-output net.
        let mut net = network_init(&[2, 1], 0).unwrap();
        net.weights_mut(0).fill(0.0);
        net.biases_mut(0)[0] = -1.0;
        let pts = random_batch(4, 2, 8);
        assert!(ratio_velocity(&net, FDivergence::Kl, OutputMap::Identity, &pts).is_err());
        // The softplus clamp repairs it.
        let v = ratio_velocity(
            &net,
            FDivergence::Kl,
            OutputMap::softplus_clamp_default(),
            &pts,
        )
        .unwrap();
        assert!(v.all_finite());
    }

    #[test]
    fn velocity_matches_finite_differences_of_mapped_field() {
        // For each generator, v = -f''(R) grad R where R is the mapped
        // output; check column-by-column against central differences of a
        // scalar evaluation path built only from forward passes.
        let net = network_init(&[2, 8, 8, 1], 9).unwrap();
        let map = OutputMap::softplus_clamp_default();
        let pts = random_batch(6, 2, 10);
        let h = 1e-5;
        for div in FDivergence::ALL {
            let v = ratio_velocity(&net, div, map, &pts).unwrap();
            for i in 0..pts.rows() {
                for j in 0..2 {
                    let eval_r = |delta: f64| {
                        let mut x = pts.clone();
                        x.set(i, j, x.get(i, j) + delta);
                        let out = net.forward(&x).unwrap();
                        map.apply(out.get(i, 0))
                    };
                    let r0 = eval_r(0.0);
                    let dr = (eval_r(h) - eval_r(-h)) / (2.0 * h);
                    let expect = -f_second(div, r0).unwrap() * dr;
                    assert!(
                        (v.get(i, j) - expect).abs() <= 1e-6 * (1.0 + expect.abs()),
                        "{} row {} col {}: {} vs {}",
                        div.name(),
                        i,
                        j,
                        v.get(i, j),
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn diff_velocity_is_minus_two_gradient() {
        let net = network_init(&[2, 16, 1], 11).unwrap();
        let pts = random_batch(32, 2, 12);
        let v = diff_velocity(&net, &pts).unwrap();
        let g = net.input_gradient(&pts).unwrap();
        for (a, b) in v.as_slice().iter().zip(g.as_slice()) {
            assert_eq!(a.to_bits(), (-2.0 * b).to_bits());
        }
    }

    #[test]
    fn kernel_grad_hand_value() {
        let k = Kernel::new(1.0).unwrap();
        let g = kernel_grad(k, &[1.0], &[0.0]);
        let expect = -(-0.5f64).exp();
        assert!((g[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn kernel_bandwidth_validation() {
        assert!(Kernel::new(0.0).is_err());
        assert!(Kernel::new(-1.0).is_err());
        assert!(Kernel::new(f64::NAN).is_err());
    }

    #[test]
    fn median_heuristic_hand_case() {
        let pts = Matrix::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let k = Kernel::median_heuristic(&pts).unwrap();
        assert_eq!(k.bandwidth(), 2.0);
        let dup = Matrix::from_vec(2, 1, vec![5.0, 5.0]).unwrap();
        assert!(Kernel::median_heuristic(&dup).is_err());
    }

    #[test]
    fn mmd_velocity_zero_at_fixed_point() {
        let pool = random_batch(40, 2, 13);
        let k = Kernel::new(0.7).unwrap();
        let v = mmd_velocity(k, &pool, &pool, &pool).unwrap();
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mmd_velocity_matches_double_loop_oracle() {
        // Independent re-derivation: per point and coordinate, accumulate
        // -(x_j - z_j)/h^2 * exp(-||x - z||^2 / (2 h^2)) sample by sample,
        // then take the difference of the two pool means.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for case in 0..20 {
            let n_t = rng.random_range(2..12);
            let n_c = rng.random_range(2..12);
            let n_p = rng.random_range(1..6);
            let target = random_batch(n_t, 2, 100 + case);
            let current = random_batch(n_c, 2, 200 + case);
            let points = random_batch(n_p, 2, 300 + case);
            let h: f64 = rng.random_range(0.3..2.0);
            let kernel = Kernel::new(h).unwrap();
            let v = mmd_velocity(kernel, &target, &current, &points).unwrap();
            for i in 0..n_p {
                let x = points.row(i);
                for j in 0..2 {
                    let mut pull = 0.0;
                    for t in 0..n_t {
                        let z = target.row(t);
                        let sq: f64 =
                            x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                        pull += -(x[j] - z[j]) / (h * h) * (-sq / (2.0 * h * h)).exp();
                    }
                    pull /= n_t as f64;
                    let mut push = 0.0;
                    for c in 0..n_c {
                        let z = current.row(c);
                        let sq: f64 =
                            x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                        push += -(x[j] - z[j]) / (h * h) * (-sq / (2.0 * h * h)).exp();
                    }
                    push /= n_c as f64;
                    assert!(
                        (v.get(i, j) - (pull - push)).abs() <= 1e-12,
                        "case {} row {} col {}",
                        case,
                        i,
                        j
                    );
                }
            }
        }
    }

    #[test]
    fn mmd_velocity_translation_equivariant_exactly_on_dyadics() {
        // Dyadic coordinates plus an integer shift stay exactly
        // representable, so the difference-only dependence is bit-exact.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let dyadic = |rng: &mut ChaCha8Rng, n: usize| {
            let data = (0..n * 2)
                .map(|_| rng.random_range(-32..32) as f64 / 16.0)
                .collect();
            Matrix::from_vec(n, 2, data).unwrap()
        };
        let target = dyadic(&mut rng, 10);
        let current = dyadic(&mut rng, 8);
        let points = dyadic(&mut rng, 5);
        let kernel = Kernel::new(0.75).unwrap();
        let v0 = mmd_velocity(kernel, &target, &current, &points).unwrap();
        let shift = [3.0, -7.0];
        let shifted = |m: &Matrix| {
            let mut s = m.clone();
            for i in 0..s.rows() {
                let r = s.row_mut(i);
                r[0] += shift[0];
                r[1] += shift[1];
            }
            s
        };
        let v1 = mmd_velocity(
            kernel,
            &shifted(&target),
            &shifted(&current),
            &shifted(&points),
        )
        .unwrap();
        for (a, b) in v0.as_slice().iter().zip(v1.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mmd_velocity_points_toward_an_offset_target() {
        // Target shifted +1 in x: the field at the current points must have
        // positive mean x-component.
        let current = random_batch(30, 2, 16);
        let mut target = random_batch(30, 2, 17);
        for i in 0..target.rows() {
            target.row_mut(i)[0] += 1.0;
        }
        let k = Kernel::new(1.0).unwrap();
        let v = mmd_velocity(k, &target, &current, &current).unwrap();
        let mean_x: f64 =
            (0..v.rows()).map(|i| v.get(i, 0)).sum::<f64>() / v.rows() as f64;
        assert!(mean_x > 0.0);
    }

    #[test]
    fn cap_rows_rescales_only_long_rows() {
        let mut f = Matrix::from_rows(&[&[3.0, 4.0], &[0.1, 0.2]]).unwrap();
        let before_short = [f.get(1, 0), f.get(1, 1)];
        cap_rows(&mut f, 1.0);
        let n0 = (f.get(0, 0) * f.get(0, 0) + f.get(0, 1) * f.get(0, 1)).sqrt();
        assert!((n0 - 1.0).abs() < 1e-12);
        assert!((f.get(0, 0) - 0.6).abs() < 1e-12);
        assert_eq!(f.get(1, 0).to_bits(), before_short[0].to_bits());
        assert_eq!(f.get(1, 1).to_bits(), before_short[1].to_bits());
        let snapshot = f.clone();
        cap_rows(&mut f, f64::INFINITY);
        assert_eq!(f.as_slice(), snapshot.as_slice());
    }
}
