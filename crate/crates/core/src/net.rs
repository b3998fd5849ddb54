//! ReLU multilayer perceptron with exact reverse-mode gradients.
//!
//! The network is a plain fully-connected stack: every hidden layer applies
//! ReLU, the output layer is linear. Weights are stored row-major as
//! `fan_out x fan_in`, so both the forward dot products and the backward
//! accumulations walk contiguous memory.
//!
//! Three differentiation paths are provided, all exact (up to the ReLU
//! subgradient convention `relu'(0) := 0`):
//!
//! * [`Network::backward`]: gradients of `sum_i upstream_i . output_i`
//!   with respect to every parameter and every input coordinate;
//! * [`Network::input_gradient`]: `grad_x R(x)` per row for scalar-output
//!   networks, the quantity the velocity fields consume;
//! * a second-order pass (crate-internal, surfaced through
//!   [`crate::bregman::gradient_penalty`]) that differentiates the mean
//!   squared input-gradient norm with respect to the parameters. For a ReLU
//!   network the input gradient is piecewise constant in the activations, so
//!   the pass only needs the backward graph re-traversed in adjoint order;
//!   biases get exactly zero gradient from this term.
//!
//! Optimization is RMSProp: `acc <- 0.9 acc + 0.1 g^2`,
//! `param <- param - lr * g / sqrt(acc + 1e-8)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mat::Matrix;
use crate::{Error, Result};

/// Dot product with four independent accumulators so the loop vectorizes
/// without reassociating a single serial chain.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n4 = a.len() & !3;
    let mut acc = [0.0f64; 4];
    let mut j = 0;
    while j < n4 {
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while j < a.len() {
        s += a[j] * b[j];
        j += 1;
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `fan_out x fan_in`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Fully-connected ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-parameter gradients in the same shapes as the network.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    layers: Vec<Layer>,
}

/// The fitting networks used throughout: three ReLU layers of 64 units and a
/// linear scalar output.
pub fn default_ratio_widths(input_dim: usize) -> Vec<usize> {
    vec![input_dim, 64, 64, 64, 1]
}

/// He-style initialization: weights drawn from a zero-mean normal with
/// standard deviation `sqrt(2 / fan_in)`, biases zero. Deterministic in
/// `seed`.
pub fn network_init(widths: &[usize], seed: u64) -> Result<Network> {
    if widths.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a network needs at least input and output widths, got {:?}",
            widths
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidConfig(format!(
            "zero layer width in {:?}",
            widths
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        layers.push(Layer {
            w,
            b: vec![0.0; fan_out],
        });
    }
    Ok(Network {
        widths: widths.to_vec(),
        layers,
    })
}

/// Forward activations for one batch: `acts[0]` is the input, `acts[k+1]` the
/// output of layer `k` (post-ReLU for hidden layers).
pub(crate) struct Trace {
    pub(crate) acts: Vec<Matrix>,
}

impl Trace {
    pub(crate) fn output(&self) -> &Matrix {
        self.acts.last().expect("trace always has the input matrix")
    }
}

impl Network {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.layers[layer].w
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.layers[layer].b
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.layers[layer].w
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.layers[layer].b
    }

    /// Total parameter count (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter access, layer-major, weights before biases within a
    /// layer. Mirrors [`ParamGrads::to_flat`].
    pub fn get_param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for l in &self.layers {
            if i < l.w.len() {
                return l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index {} out of range", idx);
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let mut i = idx;
        for l in &mut self.layers {
            if i < l.w.len() {
                l.w[i] = v;
                return;
            }
            i -= l.w.len();
            if i < l.b.len() {
                l.b[i] = v;
                return;
            }
            i -= l.b.len();
        }
        panic!("parameter index {} out of range", idx);
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input columns, batch has {}",
                self.input_width(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let n = x.rows();
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let relu = k < last;
            let fan_in = self.widths[k];
            let fan_out = self.widths[k + 1];
            let input = &acts[k];
            let mut out = Matrix::zeros(n, fan_out);
            for i in 0..n {
                let xi = input.row(i);
                let oi = out.row_mut(i);
                for o in 0..fan_out {
                    let mut v = dot(&layer.w[o * fan_in..(o + 1) * fan_in], xi) + layer.b[o];
                    if relu && v < 0.0 {
                        v = 0.0;
                    }
                    oi[o] = v;
                }
            }
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Batched forward pass. Deterministic: the same network and batch give
    /// bitwise-identical output.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tr = self.trace(x)?;
        Ok(tr.acts.pop().expect("trace has at least the input"))
    }

    /// Reverse-mode gradients of `sum_i upstream[i] . output[i]` with respect
    /// to all parameters and to the inputs. `upstream` must be
    /// `n x output_width`. Returns `(parameter grads, n x input_width input
    /// grads)`.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<(ParamGrads, Matrix)> {
        let tr = self.trace(x)?;
        if upstream.rows() != x.rows() || upstream.cols() != self.output_width() {
            return Err(Error::ShapeMismatch(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                x.rows(),
                self.output_width()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let input_grads = self.backward_trace(&tr, upstream, &mut grads);
        Ok((grads, input_grads))
    }

    /// Backward pass over a previously computed trace, accumulating into
    /// `grads`. Returns the input gradients.
    pub(crate) fn backward_trace(
        &self,
        tr: &Trace,
        upstream: &Matrix,
        grads: &mut ParamGrads,
    ) -> Matrix {
        let n = upstream.rows();
        let mut dz = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let fan_in = self.widths[k];
            let fan_out = self.widths[k + 1];
            let layer = &self.layers[k];
            let g = &mut grads.layers[k];
            let a_in = &tr.acts[k];
            let mut da = Matrix::zeros(n, fan_in);
            for i in 0..n {
                let d = dz.row(i);
                let ai = a_in.row(i);
                let dai = da.row_mut(i);
                for o in 0..fan_out {
                    let doi = d[o];
                    if doi != 0.0 {
                        axpy(&mut g.w[o * fan_in..(o + 1) * fan_in], doi, ai);
                        g.b[o] += doi;
                        axpy(dai, doi, &layer.w[o * fan_in..(o + 1) * fan_in]);
                    }
                }
            }
            if k > 0 {
                // Entering layer k-1's ReLU: zero where the activation was
                // clipped (relu'(0) := 0 matches the strict > test).
                for i in 0..n {
                    let ai = tr.acts[k].row(i);
                    for (d, a) in da.row_mut(i).iter_mut().zip(ai) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
            dz = da;
        }
        dz
    }

    /// Per-row `grad_x R(x)` for a scalar-output network.
    pub fn input_gradient(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.value_and_input_grad(x)?.1)
    }

    /// Scalar outputs and input gradients in one pass, row-parallel. This is
    /// the velocity-field hot path; rows are independent so the result is
    /// bitwise identical for any thread count.
    pub fn value_and_input_grad(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if self.output_width() != 1 {
            return Err(Error::InvalidArgument(format!(
                "input gradients need a scalar output, network has width {}",
                self.output_width()
            )));
        }
        self.check_input(x)?;
        let n = x.rows();
        let m = self.input_width();
        let mut vals = vec![0.0; n];
        let mut grads = Matrix::zeros(n, m);
        const CHUNK: usize = 256;
        use rayon::prelude::*;
        vals.par_chunks_mut(CHUNK)
            .zip(grads.as_mut_slice().par_chunks_mut(CHUNK * m))
            .zip(x.as_slice().par_chunks(CHUNK * m))
            .for_each(|((vc, gc), xc)| {
                let rows = xc.len() / m;
                let xm = Matrix::from_vec(rows, m, xc.to_vec()).expect("chunk shape");
                let tr = self.trace(&xm).expect("shape checked above");
                let out = tr.output();
                for (v, o) in vc.iter_mut().zip(out.iter_rows()) {
                    *v = o[0];
                }
                let g = self.input_grad_trace(&tr);
                gc.copy_from_slice(g.as_slice());
            });
        Ok((vals, grads))
    }

    /// Input gradients only (upstream fixed at one), without touching
    /// parameter gradients.
    pub(crate) fn input_grad_trace(&self, tr: &Trace) -> Matrix {
        let n = tr.acts[0].rows();
        let mut dz = Matrix::zeros(n, 1);
        dz.as_mut_slice().fill(1.0);
        for k in (0..self.layers.len()).rev() {
            let fan_in = self.widths[k];
            let fan_out = self.widths[k + 1];
            let layer = &self.layers[k];
            let mut da = Matrix::zeros(n, fan_in);
            for i in 0..n {
                let d = dz.row(i);
                let dai = da.row_mut(i);
                for o in 0..fan_out {
                    let doi = d[o];
                    if doi != 0.0 {
                        axpy(dai, doi, &layer.w[o * fan_in..(o + 1) * fan_in]);
                    }
                }
            }
            if k > 0 {
                for i in 0..n {
                    let ai = tr.acts[k].row(i);
                    for (d, a) in da.row_mut(i).iter_mut().zip(ai) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
            dz = da;
        }
        dz
    }

    /// Value and parameter gradient of
    /// `(1/n) sum_i || grad_x R(x_i) ||^2`, the second-order path: the input
    /// gradient is itself a function of the weights, and its norm is
    /// differentiated through the backward recursion. ReLU masks are locally
    /// constant, so the only parameter dependence is through the weight
    /// matrices; biases receive exactly zero gradient. `scale` times the
    /// gradient is accumulated into `grads`; the returned value is unscaled.
    pub(crate) fn penalty_trace(&self, tr: &Trace, scale: f64, grads: &mut ParamGrads) -> f64 {
        let nl = self.layers.len();
        let n = tr.acts[0].rows();
        debug_assert_eq!(self.output_width(), 1);

        // Downward pass, keeping every z-space delta. dz[k] is n x widths[k+1].
        let mut dz: Vec<Matrix> = Vec::with_capacity(nl);
        dz.resize(nl, Matrix::zeros(0, 0));
        let mut ones = Matrix::zeros(n, 1);
        ones.as_mut_slice().fill(1.0);
        dz[nl - 1] = ones;
        let mut input_grad = Matrix::zeros(n, self.widths[0]);
        for k in (0..nl).rev() {
            let fan_in = self.widths[k];
            let fan_out = self.widths[k + 1];
            let layer = &self.layers[k];
            let mut da = Matrix::zeros(n, fan_in);
            for i in 0..n {
                let d = dz[k].row(i);
                let dai = da.row_mut(i);
                for o in 0..fan_out {
                    let doi = d[o];
                    if doi != 0.0 {
                        axpy(dai, doi, &layer.w[o * fan_in..(o + 1) * fan_in]);
                    }
                }
            }
            if k > 0 {
                for i in 0..n {
                    let ai = tr.acts[k].row(i);
                    for (d, a) in da.row_mut(i).iter_mut().zip(ai) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                dz[k - 1] = da;
            } else {
                input_grad = da;
            }
        }

        let inv_n = 1.0 / n.max(1) as f64;
        let mut value = 0.0;
        for i in 0..n {
            value += dot(input_grad.row(i), input_grad.row(i));
        }
        value *= inv_n;

        // Adjoint pass back up the delta recursion. gbar is the adjoint of
        // the input gradient; dzbar[k] the adjoint of dz[k].
        let c = 2.0 * inv_n * scale;
        let mut gbar = input_grad;
        for v in gbar.as_mut_slice() {
            *v *= c;
        }
        // Edge: input_grad = W_0^T dz_0 (mask on the input side does not
        // exist; acts[0] is the raw input).
        let mut dzbar = Matrix::zeros(n, self.widths[1]);
        {
            let fan_in = self.widths[0];
            let fan_out = self.widths[1];
            let layer = &self.layers[0];
            let g = &mut grads.layers[0];
            for i in 0..n {
                let gb = gbar.row(i);
                let d0 = dz[0].row(i);
                let db = dzbar.row_mut(i);
                for o in 0..fan_out {
                    db[o] = dot(&layer.w[o * fan_in..(o + 1) * fan_in], gb);
                    let doi = d0[o];
                    if doi != 0.0 {
                        axpy(&mut g.w[o * fan_in..(o + 1) * fan_in], doi, gb);
                    }
                }
            }
        }
        // Edges dz_{k-1} = m_k . (W_k^T dz_k) for k = 1..nl-1, plus the final
        // edge into the constant dz_{nl-1}, which still feeds W_{nl-1}.
        for k in 1..nl {
            let fan_in = self.widths[k];
            let fan_out = self.widths[k + 1];
            let layer = &self.layers[k];
            let g = &mut grads.layers[k];
            let mut next = Matrix::zeros(n, fan_out);
            for i in 0..n {
                // hbar = mask_k . dzbar_{k-1}
                let mut hbar = dzbar.row(i).to_vec();
                for (h, a) in hbar.iter_mut().zip(tr.acts[k].row(i)) {
                    if *a <= 0.0 {
                        *h = 0.0;
                    }
                }
                let dk = dz[k].row(i);
                let nx = next.row_mut(i);
                for o in 0..fan_out {
                    nx[o] = dot(&layer.w[o * fan_in..(o + 1) * fan_in], &hbar);
                    let doi = dk[o];
                    if doi != 0.0 {
                        axpy(&mut g.w[o * fan_in..(o + 1) * fan_in], doi, &hbar);
                    }
                }
            }
            dzbar = next;
        }
        value
    }

    /// Serializes to the checkpoint JSON schema
    /// `{"widths": [...], "layers": [{"w": [...], "b": [...]}]}` with
    /// shortest-round-trip float encoding, so parsing recovers every finite
    /// double exactly.
    pub fn to_json(&self) -> String {
        let wire = NetJson {
            widths: self.widths.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    w: l.w.clone(),
                    b: l.b.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&wire).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Network> {
        let wire: NetJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<network json>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if wire.widths.len() < 2 || wire.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "bad widths in checkpoint: {:?}",
                wire.widths
            )));
        }
        if wire.layers.len() != wire.widths.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} layers for {} widths",
                wire.layers.len(),
                wire.widths.len()
            )));
        }
        let mut layers = Vec::with_capacity(wire.layers.len());
        for (k, l) in wire.layers.into_iter().enumerate() {
            let (fan_in, fan_out) = (wire.widths[k], wire.widths[k + 1]);
            if l.w.len() != fan_in * fan_out || l.b.len() != fan_out {
                return Err(Error::InvalidConfig(format!(
                    "layer {} shapes do not match widths {}x{}",
                    k, fan_out, fan_in
                )));
            }
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NumericFault(format!(
                    "non-finite parameter in checkpoint layer {}",
                    k
                )));
            }
            layers.push(Layer { w: l.w, b: l.b });
        }
        Ok(Network {
            widths: wire.widths,
            layers,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NetJson {
    widths: Vec<usize>,
    layers: Vec<LayerJson>,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> ParamGrads {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.layers[layer].w
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.layers[layer].b
    }

    /// Adds `c * other` into `self`. Shapes must match.
    pub fn axpy(&mut self, c: f64, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut a.w, c, &b.w);
            axpy(&mut a.b, c, &b.b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v *= c);
            l.b.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Flat layout matching [`Network::get_param`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// RMSProp state: one squared-gradient accumulator per parameter.
#[derive(Debug, Clone)]
pub struct OptState {
    lr: f64,
    decay: f64,
    eps: f64,
    acc: Vec<Layer>,
}

impl OptState {
    /// Standard coefficients: decay 0.9, epsilon 1e-8.
    pub fn new(net: &Network, lr: f64) -> Result<OptState> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                lr
            )));
        }
        Ok(OptState {
            lr,
            decay: 0.9,
            eps: 1e-8,
            acc: net
                .layers
                .iter()
                .map(|l| Layer {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One RMSProp update in place. A non-finite gradient rejects the whole
    /// step: parameters and accumulators are left untouched.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.w.len() != l.w.len() || g.b.len() != l.b.len())
        {
            return Err(Error::ShapeMismatch(
                "gradient shapes do not match the network".into(),
            ));
        }
        if !grads.all_finite() {
            return Err(Error::NumericFault(
                "non-finite gradient; optimizer step rejected".into(),
            ));
        }
        for ((layer, acc), g) in net.layers.iter_mut().zip(&mut self.acc).zip(&grads.layers) {
            update(&mut layer.w, &mut acc.w, &g.w, self.lr, self.decay, self.eps);
            update(&mut layer.b, &mut acc.b, &g.b, self.lr, self.decay, self.eps);
        }
        Ok(())
    }
}

fn update(p: &mut [f64], acc: &mut [f64], g: &[f64], lr: f64, decay: f64, eps: f64) {
    for ((pv, av), gv) in p.iter_mut().zip(acc.iter_mut()).zip(g) {
        *av = decay * *av + (1.0 - decay) * gv * gv;
        *pv -= lr * gv / (*av + eps).sqrt();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a network with every parameter set explicitly.
    fn manual_net(widths: &[usize], params: &[(&[f64], &[f64])]) -> Network {
        let mut net = network_init(widths, 0).unwrap();
        for (k, (w, b)) in params.iter().enumerate() {
            net.weights_mut(k).copy_from_slice(w);
            net.biases_mut(k).copy_from_slice(b);
        }
        net
    }

    /// Central finite difference of `f` at `x0` with step `h`.
    fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    fn assert_close(a: f64, b: f64, rtol: f64, atol: f64, what: &str) {
        let tol = atol + rtol * a.abs().max(b.abs());
        assert!(
            (a - b).abs() <= tol,
            "{}: {} vs {} (tol {})",
            what,
            a,
            b,
            tol
        );
    }

    #[test]
    fn init_rejects_bad_widths() {
        assert!(network_init(&[3], 0).is_err());
        assert!(network_init(&[3, 0, 1], 0).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = network_init(&[2, 64, 64, 64, 1], 9).unwrap();
        let b = network_init(&[2, 64, 64, 64, 1], 9).unwrap();
        assert_eq!(a, b);
        let c = network_init(&[2, 64, 64, 64, 1], 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let net = network_init(&[2, 64, 64, 64, 1], 7).unwrap();
        assert_eq!(net.num_layers(), 4);
        assert_eq!(net.weights(0).len(), 64 * 2);
        assert_eq!(net.weights(1).len(), 64 * 64);
        assert_eq!(net.weights(3).len(), 64);
        for k in 0..4 {
            assert!(net.biases(k).iter().all(|&b| b == 0.0));
        }
        // Zero bias + He weights: the origin maps to zero.
        let out = net
            .forward(&Matrix::from_rows(&[&[0.0, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn init_weight_scale_tracks_fan_in() {
        let net = network_init(&[64, 64, 1], 3).unwrap();
        let w = net.weights(0);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 64.0;
        assert!((var / expected - 1.0).abs() < 0.15, "var {}", var);
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn forward_single_linear_layer_is_affine() {
        // No hidden layer, so no ReLU anywhere: out = w.x + b.
        let net = manual_net(&[2, 1], &[(&[1.0, -1.0], &[0.5])]);
        let out = net
            .forward(&Matrix::from_rows(&[&[2.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(out.get(0, 0), 1.5);
    }

    #[test]
    fn forward_matches_hand_unrolled_two_layer() {
        // Hand computation, kept independent of the implementation:
        //   h = relu(W1 x + b1), y = W2 h + b2
        let w1 = [0.5, -1.0, 1.5, 0.25];
        let b1 = [0.1, -0.2];
        let w2 = [2.0, -3.0];
        let b2 = [0.05];
        let net = manual_net(&[2, 2, 1], &[(&w1, &b1), (&w2, &b2)]);
        let x = [0.8, -0.4];

        let z1 = 0.5 * 0.8 + (-1.0) * (-0.4) + 0.1;
        let z2 = 1.5 * 0.8 + 0.25 * (-0.4) + (-0.2);
        let h1 = if z1 > 0.0 { z1 } else { 0.0 };
        let h2 = if z2 > 0.0 { z2 } else { 0.0 };
        let y = 2.0 * h1 - 3.0 * h2 + 0.05;

        let out = net.forward(&Matrix::from_rows(&[&x]).unwrap()).unwrap();
        assert_close(out.get(0, 0), y, 1e-15, 0.0, "two-layer forward");
    }

    #[test]
    fn forward_relu_clips_hidden_only() {
        // Hidden unit forced negative -> contributes nothing; linear output
        // may still go negative.
        let net = manual_net(&[1, 1, 1], &[(&[1.0], &[-5.0]), (&[1.0], &[-0.25])]);
        let out = net
            .forward(&Matrix::from_rows(&[&[1.0]]).unwrap())
            .unwrap();
        assert_eq!(out.get(0, 0), -0.25);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = network_init(&[2, 64, 64, 64, 1], 11).unwrap();
        let x = random_batch(40, 2, 5);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    /// Deterministic batch with entries in [-1, 1].
    fn random_batch(n: usize, m: usize, seed: u64) -> Matrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, m, data).unwrap()
    }

    /// Random batch re-drawn until no pre-activation sits within `margin` of
    /// a ReLU kink, so finite differences stay on one linear piece.
    fn batch_avoiding_kinks(net: &Network, n: usize, seed: u64, margin: f64) -> Matrix {
        for attempt in 0..200 {
            let x = random_batch(n, net.input_width(), seed + attempt * 1000);
            let tr = net.trace(&x).unwrap();
            let nl = net.num_layers();
            let safe = (1..nl).all(|k| {
                tr.acts[k]
                    .as_slice()
                    .iter()
                    .all(|&a| a == 0.0 || a > margin)
            });
            if safe {
                return x;
            }
        }
        panic!("could not find a kink-free batch");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = network_init(&[2, 8, 6, 1], 21).unwrap();
        let x = batch_avoiding_kinks(&net, 7, 100, 1e-3);
        let upstream = random_batch(7, 1, 999);
        let (grads, input_grads) = net.backward(&x, &upstream).unwrap();
        let flat = grads.to_flat();
        let h = 1e-5;

        let loss = |net: &Network, x: &Matrix| -> f64 {
            let out = net.forward(x).unwrap();
            (0..x.rows()).map(|i| upstream.get(i, 0) * out.get(i, 0)).sum()
        };

        for idx in 0..net.param_count() {
            let base = net.get_param(idx);
            let fd = central_diff(
                |v| {
                    let mut n2 = net.clone();
                    n2.set_param(idx, v);
                    loss(&n2, &x)
                },
                base,
                h,
            );
            assert_close(flat[idx], fd, 1e-5, 1e-7, &format!("param {}", idx));
        }
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let base = x.get(i, j);
                let fd = central_diff(
                    |v| {
                        let mut x2 = x.clone();
                        x2.set(i, j, v);
                        loss(&net, &x2)
                    },
                    base,
                    h,
                );
                assert_close(input_grads.get(i, j), fd, 1e-5, 1e-7, "input grad");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = network_init(&[2, 6, 1], 31).unwrap();
        let x = random_batch(5, 2, 41);
        let u1 = random_batch(5, 1, 42);
        let u2 = random_batch(5, 1, 43);
        let mut usum = u1.clone();
        for (a, b) in usum.as_mut_slice().iter_mut().zip(u2.as_slice()) {
            *a += b;
        }
        let (g1, i1) = net.backward(&x, &u1).unwrap();
        let (g2, i2) = net.backward(&x, &u2).unwrap();
        let (gs, is) = net.backward(&x, &usum).unwrap();
        let f1 = g1.to_flat();
        let f2 = g2.to_flat();
        let fs = gs.to_flat();
        for i in 0..f1.len() {
            assert_close(fs[i], f1[i] + f2[i], 1e-12, 1e-12, "param linearity");
        }
        for (a, (b, c)) in is
            .as_slice()
            .iter()
            .zip(i1.as_slice().iter().zip(i2.as_slice()))
        {
            assert_close(*a, b + c, 1e-12, 1e-12, "input linearity");
        }
    }

    #[test]
    fn backward_duplicated_rows_contribute_identically() {
        let net = network_init(&[2, 8, 1], 17).unwrap();
        let row = [0.3, -0.6];
        let x = Matrix::from_rows(&[&row, &row]).unwrap();
        let ones = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let (gd, input_grads) = net.backward(&x, &ones).unwrap();
        assert_eq!(input_grads.row(0), input_grads.row(1));

        let x1 = Matrix::from_rows(&[&row]).unwrap();
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let (gs, _) = net.backward(&x1, &one).unwrap();
        for (d, s) in gd.to_flat().iter().zip(gs.to_flat()) {
            assert_close(*d, 2.0 * s, 1e-12, 1e-12, "doubled contribution");
        }
    }

    #[test]
    fn input_gradient_of_linear_map() {
        // R(x) = x1 + 2 x2 built without hidden layers.
        let net = manual_net(&[2, 1], &[(&[1.0, 2.0], &[0.0])]);
        let g = net
            .input_gradient(&Matrix::from_rows(&[&[5.0, -3.0], &[0.0, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(g.row(0), &[1.0, 2.0]);
        assert_eq!(g.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn input_gradient_of_constant_net_is_zero() {
        let net = manual_net(&[2, 2, 1], &[(&[0.0; 4], &[1.0, 2.0]), (&[0.0, 0.0], &[3.0])]);
        let g = net
            .input_gradient(&Matrix::from_rows(&[&[1.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn input_gradient_requires_scalar_output() {
        let net = network_init(&[2, 4, 2], 5).unwrap();
        assert!(net
            .input_gradient(&Matrix::from_rows(&[&[0.1, 0.2]]).unwrap())
            .is_err());
    }

    #[test]
    fn value_and_input_grad_agrees_with_backward() {
        let net = network_init(&[3, 16, 16, 1], 77).unwrap();
        let x = random_batch(600, 3, 7);
        let (vals, grads) = net.value_and_input_grad(&x).unwrap();
        let out = net.forward(&x).unwrap();
        let mut ones = Matrix::zeros(600, 1);
        ones.as_mut_slice().fill(1.0);
        let (_, ig) = net.backward(&x, &ones).unwrap();
        for i in 0..600 {
            assert_eq!(vals[i], out.get(i, 0));
            assert_eq!(grads.row(i), ig.row(i));
        }
    }

    #[test]
    fn penalty_hand_example_one_hidden_unit() {
        // R(x) = d relu(a x + c) + e with the unit active:
        // grad_x R = d a, P = d^2 a^2, dP/da = 2 d^2 a, dP/dd = 2 a^2 d.
        let (a, c, d, e) = (0.7, 0.4, -1.3, 0.2);
        let net = manual_net(&[1, 1, 1], &[(&[a], &[c]), (&[d], &[e])]);
        let x = Matrix::from_rows(&[&[0.5]]).unwrap(); // z = 0.75 > 0
        let tr = net.trace(&x).unwrap();
        let mut grads = ParamGrads::zeros_like(&net);
        let val = net.penalty_trace(&tr, 1.0, &mut grads);
        assert_close(val, d * d * a * a, 1e-14, 0.0, "penalty value");
        assert_close(grads.weights(0)[0], 2.0 * d * d * a, 1e-14, 0.0, "dP/da");
        assert_close(grads.weights(1)[0], 2.0 * a * a * d, 1e-14, 0.0, "dP/dd");
        assert_eq!(grads.biases(0)[0], 0.0);
        assert_eq!(grads.biases(1)[0], 0.0);
    }

    #[test]
    fn penalty_matches_finite_differences() {
        let net = network_init(&[2, 6, 5, 1], 51).unwrap();
        let x = batch_avoiding_kinks(&net, 6, 300, 1e-3);
        let tr = net.trace(&x).unwrap();
        let mut grads = ParamGrads::zeros_like(&net);
        net.penalty_trace(&tr, 1.0, &mut grads);
        let flat = grads.to_flat();

        let penalty_value = |net: &Network| -> f64 {
            let g = net.input_gradient(&x).unwrap();
            let n = x.rows() as f64;
            (0..x.rows()).map(|i| dot(g.row(i), g.row(i))).sum::<f64>() / n
        };

        for idx in 0..net.param_count() {
            let base = net.get_param(idx);
            let fd = central_diff(
                |v| {
                    let mut n2 = net.clone();
                    n2.set_param(idx, v);
                    penalty_value(&n2)
                },
                base,
                1e-5,
            );
            assert_close(flat[idx], fd, 1e-5, 1e-7, &format!("penalty param {}", idx));
        }
    }

    #[test]
    fn rmsprop_single_hand_step() {
        // param 0, g = 1, acc 0, lr 0.1: acc -> 0.1,
        // param -> -0.1 / sqrt(0.1 + 1e-8).
        let mut net = manual_net(&[1, 1], &[(&[0.0], &[0.0])]);
        let mut opt = OptState::new(&net, 0.1).unwrap();
        let mut g = ParamGrads::zeros_like(&net);
        g.layers[0].w[0] = 1.0;
        opt.step(&mut net, &g).unwrap();
        let expect = -0.1 / (0.1f64 + 1e-8).sqrt();
        assert_close(net.weights(0)[0], expect, 1e-15, 0.0, "rmsprop step");
    }

    #[test]
    fn rmsprop_zero_gradient_is_identity_on_params() {
        let mut net = network_init(&[2, 4, 1], 2).unwrap();
        let before = net.clone();
        let mut opt = OptState::new(&net, 0.01).unwrap();
        let g = ParamGrads::zeros_like(&net);
        opt.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradients() {
        let mut net = network_init(&[2, 4, 1], 2).unwrap();
        let before = net.clone();
        let mut opt = OptState::new(&net, 0.01).unwrap();
        let mut g = ParamGrads::zeros_like(&net);
        g.layers[0].w[0] = f64::NAN;
        let err = opt.step(&mut net, &g);
        assert!(matches!(err, Err(Error::NumericFault(_))));
        assert_eq!(net, before);
    }

    #[test]
    fn rmsprop_repeated_steps_descend_a_quadratic() {
        // Minimize (p - 3)^2 by feeding its gradient; the parameter must move
        // monotonically toward 3.
        let mut net = manual_net(&[1, 1], &[(&[0.0], &[0.0])]);
        let mut opt = OptState::new(&net, 0.05).unwrap();
        let mut last = (net.weights(0)[0] - 3.0f64).abs();
        for _ in 0..50 {
            let p = net.weights(0)[0];
            let mut g = ParamGrads::zeros_like(&net);
            g.layers[0].w[0] = 2.0 * (p - 3.0);
            opt.step(&mut net, &g).unwrap();
            let now = (net.weights(0)[0] - 3.0f64).abs();
            assert!(now <= last + 1e-12);
            last = now;
        }
        assert!(last < 1.0);
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let mut net = network_init(&[2, 3, 1], 13).unwrap();
        // Exercise awkward magnitudes.
        net.weights_mut(0)[0] = 1e-300;
        net.weights_mut(0)[1] = -2.2250738585072014e-308;
        net.biases_mut(0)[0] = 0.1 + 0.2;
        net.weights_mut(1)[2] = 1.7976931348623157e308;
        let text = net.to_json();
        let back = Network::from_json(&text).unwrap();
        assert_eq!(net.widths(), back.widths());
        for k in 0..net.num_layers() {
            for (a, b) in net.weights(k).iter().zip(back.weights(k)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in net.biases(k).iter().zip(back.biases(k)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn json_schema_shape() {
        let net = manual_net(&[2, 1], &[(&[1.0, 2.0], &[3.0])]);
        let v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        assert_eq!(v["widths"], serde_json::json!([2, 1]));
        assert_eq!(v["layers"][0]["w"], serde_json::json!([1.0, 2.0]));
        assert_eq!(v["layers"][0]["b"], serde_json::json!([3.0]));
    }

    #[test]
    fn json_rejects_malformed_checkpoints() {
        assert!(Network::from_json("{}").is_err());
        assert!(Network::from_json(r#"{"widths":[2,1],"layers":[]}"#).is_err());
        assert!(
            Network::from_json(r#"{"widths":[2,1],"layers":[{"w":[1.0],"b":[0.0]}]}"#).is_err()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn json_round_trip_arbitrary_finite_params(
                seed in 0u64..1000,
                vals in proptest::collection::vec(
                    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
                    8,
                ),
            ) {
                let mut net = network_init(&[2, 2, 1], seed).unwrap();
                for (i, v) in vals.iter().enumerate() {
                    let idx = i % net.param_count();
                    net.set_param(idx, *v);
                }
                let back = Network::from_json(&net.to_json()).unwrap();
                for idx in 0..net.param_count() {
                    prop_assert_eq!(
                        net.get_param(idx).to_bits(),
                        back.get_param(idx).to_bits()
                    );
                }
            }

            #[test]
            fn rmsprop_accumulator_keeps_params_finite(
                steps in 1usize..30,
                g in -10.0f64..10.0,
            ) {
                let mut net = manual_net(&[1, 1], &[(&[0.5], &[0.0])]);
                let mut opt = OptState::new(&net, 0.01).unwrap();
                for _ in 0..steps {
                    let mut grads = ParamGrads::zeros_like(&net);
                    grads.layers[0].w[0] = g;
                    opt.step(&mut net, &grads).unwrap();
                    prop_assert!(net.weights(0)[0].is_finite());
                }
            }
        }
    }
}
