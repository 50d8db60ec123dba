//! Small dense networks with hand-written derivative passes.
//!
//! Besides the usual forward/VJP pair, every network supports a dual
//! forward pass (values plus a directional derivative) and the VJP of
//! that dual pass. Training on forces differentiates a directional
//! derivative of the energy, so the parameter gradient needs exactly this
//! reverse-over-forward combination; the extra term in each dual VJP is
//! the Hessian-vector contribution of the activation.
//!
//! Weights are stored row-major `(out, in)` and applied with plain loops;
//! the layers are small enough (widths 2..96) that anything fancier loses
//! to loop overhead.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network; the activation follows every layer, the last
/// one included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// `widths[0]` is the input size; each later entry is a layer output.
    pub widths: Vec<usize>,
    /// Row-major `(widths[l+1], widths[l])` matrices.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Per-layer gradient accumulator shaped like [`MlpParams`]. Carries
/// private backward-pass buffers so repeated VJP calls on the same
/// accumulator stay allocation free.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    scratch: [Vec<f64>; 4],
}

/// Post-activation values of one forward pass, reused by the VJP.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// `acts[0]` is the input, `acts[l+1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
}

/// Dual-pass record: values, directional derivatives, and pre-activation
/// derivatives (needed by the Hessian term of the dual VJP).
#[derive(Debug, Clone, Default)]
pub struct MlpDualTrace {
    pub acts: Vec<Vec<f64>>,
    pub dots: Vec<Vec<f64>>,
    /// `z_dots[l]` is the derivative of layer `l`'s pre-activation.
    pub z_dots: Vec<Vec<f64>>,
}

pub(crate) fn matvec(w: &[f64], x: &[f64], b: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, outv) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *outv = acc;
    }
}

/// `out = W x`, no bias term.
pub(crate) fn matvec_nb(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, outv) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *outv = acc;
    }
}

/// `out = W^T y`, accumulating into `out`.
pub(crate) fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let n_in = out.len();
    for (o, &yv) in y.iter().enumerate() {
        if yv == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        for (ov, wv) in out.iter_mut().zip(row) {
            *ov += wv * yv;
        }
    }
}

/// Rank-one accumulation `dw += y x^T`, `db += y`.
pub(crate) fn outer_acc(dw: &mut [f64], db: &mut [f64], y: &[f64], x: &[f64]) {
    let n_in = x.len();
    for (o, &yv) in y.iter().enumerate() {
        db[o] += yv;
        if yv == 0.0 {
            continue;
        }
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (wv, xv) in row.iter_mut().zip(x) {
            *wv += yv * xv;
        }
    }
}

impl MlpParams {
    /// Glorot-normal weights, zero biases.
    pub fn glorot(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "a network needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let std = (2.0 / (n_in + n_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            weights.push((0..n_in * n_out).map(|_| normal.sample(rng)).collect());
            biases.push(vec![0.0; n_out]);
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for l in 0..self.n_layers() {
            if self.weights[l].len() != self.widths[l] * self.widths[l + 1]
                || self.biases[l].len() != self.widths[l + 1]
            {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} tensors do not match widths {:?}",
                    self.widths
                )));
            }
            if self.weights[l]
                .iter()
                .chain(&self.biases[l])
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!("network layer {l}")));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            scratch: Default::default(),
        }
    }

    fn activate(&self, z: &mut [f64]) {
        match self.activation {
            Activation::Tanh => {
                for v in z {
                    *v = v.tanh();
                }
            }
            Activation::Relu => {
                for v in z {
                    *v = v.max(0.0);
                }
            }
        }
    }

    fn forward_into(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize(self.widths.len(), Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for l in 0..self.n_layers() {
            let (head, tail) = acts.split_at_mut(l + 1);
            let a = &head[l];
            let y = &mut tail[0];
            y.resize(self.widths[l + 1], 0.0);
            matvec(&self.weights[l], a, &self.biases[l], y);
            self.activate(y);
        }
    }

    /// Forward pass recording post-activations into `trace`.
    pub fn forward(&self, x: &[f64], trace: &mut MlpTrace) {
        self.forward_into(x, &mut trace.acts);
    }

    /// Forward pass recording only the value channel of a dual trace;
    /// [`Self::dual_complete`] fills the derivative channels later.
    pub fn forward_acts(&self, x: &[f64], trace: &mut MlpDualTrace) {
        self.forward_into(x, &mut trace.acts);
    }

    /// VJP of [`Self::forward`]: writes the input cotangent into `x_bar`
    /// and accumulates parameter cotangents into `grads`.
    pub fn vjp(&self, trace: &MlpTrace, y_bar: &[f64], x_bar: &mut [f64], grads: &mut MlpGrads) {
        self.vjp_on(&trace.acts, y_bar, x_bar, grads);
    }

    /// [`Self::vjp`] against the value channel of a dual trace.
    pub fn vjp_acts(
        &self,
        trace: &MlpDualTrace,
        y_bar: &[f64],
        x_bar: &mut [f64],
        grads: &mut MlpGrads,
    ) {
        self.vjp_on(&trace.acts, y_bar, x_bar, grads);
    }

    fn vjp_on(&self, acts: &[Vec<f64>], y_bar: &[f64], x_bar: &mut [f64], grads: &mut MlpGrads) {
        let mut bar = std::mem::take(&mut grads.scratch[0]);
        let mut next = std::mem::take(&mut grads.scratch[1]);
        bar.clear();
        bar.extend_from_slice(y_bar);
        for l in (0..self.n_layers()).rev() {
            // act' from the stored post-activation.
            let y = &acts[l + 1];
            match self.activation {
                Activation::Tanh => {
                    for (b, &yv) in bar.iter_mut().zip(y) {
                        *b *= 1.0 - yv * yv;
                    }
                }
                Activation::Relu => {
                    for (b, &yv) in bar.iter_mut().zip(y) {
                        if yv <= 0.0 {
                            *b = 0.0;
                        }
                    }
                }
            }
            let a = &acts[l];
            outer_acc(&mut grads.weights[l], &mut grads.biases[l], &bar, a);
            if l == 0 {
                for v in x_bar.iter_mut() {
                    *v = 0.0;
                }
                matvec_t_acc(&self.weights[l], &bar, x_bar);
            } else {
                next.clear();
                next.resize(self.widths[l], 0.0);
                matvec_t_acc(&self.weights[l], &bar, &mut next);
                std::mem::swap(&mut bar, &mut next);
            }
        }
        grads.scratch[0] = bar;
        grads.scratch[1] = next;
    }

    /// Forward pass carrying a directional derivative of the input.
    pub fn dual_forward(&self, x: &[f64], x_dot: &[f64], trace: &mut MlpDualTrace) {
        self.forward_into(x, &mut trace.acts);
        self.dual_complete(x_dot, trace);
    }

    /// Derivative channels of a dual trace whose value channel is already
    /// recorded ([`Self::forward_acts`]); the activation derivative comes
    /// from the stored post-activations, so no transcendentals rerun.
    pub fn dual_complete(&self, x_dot: &[f64], trace: &mut MlpDualTrace) {
        let n = self.widths.len();
        debug_assert_eq!(trace.acts.len(), n, "value channel must be recorded first");
        trace.dots.resize(n, Vec::new());
        trace.z_dots.resize(self.n_layers(), Vec::new());
        trace.dots[0].clear();
        trace.dots[0].extend_from_slice(x_dot);
        for l in 0..self.n_layers() {
            let w = &self.widths;
            let (dots_head, dots_tail) = trace.dots.split_at_mut(l + 1);
            let a_dot = &dots_head[l];
            let y_dot = &mut dots_tail[0];
            let z_dot = &mut trace.z_dots[l];
            y_dot.resize(w[l + 1], 0.0);
            z_dot.resize(w[l + 1], 0.0);
            matvec_nb(&self.weights[l], a_dot, z_dot);
            let y = &trace.acts[l + 1];
            match self.activation {
                Activation::Tanh => {
                    for o in 0..w[l + 1] {
                        y_dot[o] = (1.0 - y[o] * y[o]) * z_dot[o];
                    }
                }
                Activation::Relu => {
                    for o in 0..w[l + 1] {
                        y_dot[o] = if y[o] > 0.0 { z_dot[o] } else { 0.0 };
                    }
                }
            }
        }
    }

    /// VJP of [`Self::dual_forward`] with cotangents on both output
    /// channels. Parameter cotangents accumulate into `grads`; the input
    /// cotangents (both channels) are written into `x_bar_val`/`x_bar_dot`.
    pub fn dual_vjp(
        &self,
        trace: &MlpDualTrace,
        y_bar_val: &[f64],
        y_bar_dot: &[f64],
        x_bar_val: &mut [f64],
        x_bar_dot: &mut [f64],
        grads: &mut MlpGrads,
    ) {
        let mut bar_val = std::mem::take(&mut grads.scratch[0]);
        let mut bar_dot = std::mem::take(&mut grads.scratch[1]);
        let mut next_val = std::mem::take(&mut grads.scratch[2]);
        let mut next_dot = std::mem::take(&mut grads.scratch[3]);
        bar_val.clear();
        bar_val.extend_from_slice(y_bar_val);
        bar_dot.clear();
        bar_dot.extend_from_slice(y_bar_dot);
        for l in (0..self.n_layers()).rev() {
            let y = &trace.acts[l + 1];
            let z_dot = &trace.z_dots[l];
            // Through y = act(z), y_dot = act'(z) z_dot.
            match self.activation {
                Activation::Tanh => {
                    for o in 0..y.len() {
                        let t = y[o];
                        let d1 = 1.0 - t * t;
                        let zb_val = d1 * bar_val[o] - 2.0 * t * d1 * z_dot[o] * bar_dot[o];
                        let zb_dot = d1 * bar_dot[o];
                        bar_val[o] = zb_val;
                        bar_dot[o] = zb_dot;
                    }
                }
                Activation::Relu => {
                    for o in 0..y.len() {
                        if y[o] <= 0.0 {
                            bar_val[o] = 0.0;
                            bar_dot[o] = 0.0;
                        }
                    }
                }
            }
            // Through z = W a + b, z_dot = W a_dot.
            let a = &trace.acts[l];
            let a_dot = &trace.dots[l];
            outer_acc(&mut grads.weights[l], &mut grads.biases[l], &bar_val, a);
            let n_in = self.widths[l];
            for (o, &bd) in bar_dot.iter().enumerate() {
                if bd == 0.0 {
                    continue;
                }
                let row = &mut grads.weights[l][o * n_in..(o + 1) * n_in];
                for (wv, xv) in row.iter_mut().zip(a_dot) {
                    *wv += bd * xv;
                }
            }
            if l > 0 {
                next_val.clear();
                next_val.resize(n_in, 0.0);
                next_dot.clear();
                next_dot.resize(n_in, 0.0);
                matvec_t_acc(&self.weights[l], &bar_val, &mut next_val);
                matvec_t_acc(&self.weights[l], &bar_dot, &mut next_dot);
                std::mem::swap(&mut bar_val, &mut next_val);
                std::mem::swap(&mut bar_dot, &mut next_dot);
            } else {
                for v in x_bar_val.iter_mut() {
                    *v = 0.0;
                }
                for v in x_bar_dot.iter_mut() {
                    *v = 0.0;
                }
                matvec_t_acc(&self.weights[l], &bar_val, x_bar_val);
                matvec_t_acc(&self.weights[l], &bar_dot, x_bar_dot);
            }
        }
        grads.scratch[0] = bar_val;
        grads.scratch[1] = bar_dot;
        grads.scratch[2] = next_val;
        grads.scratch[3] = next_dot;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(act: Activation, rng: &mut ChaCha8Rng) -> MlpParams {
        MlpParams::glorot(&[3, 2, 4, 5], act, rng)
    }

    #[test]
    fn glorot_shapes_and_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = net(Activation::Tanh, &mut rng);
        m.validate().unwrap();
        assert_eq!(m.n_params(), 3 * 2 + 2 + 2 * 4 + 4 + 4 * 5 + 5);
        assert!(m.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in [Activation::Tanh, Activation::Relu] {
            let m = net(act, &mut rng);
            let x = [0.3, -0.6, 0.9];
            let y_bar = [0.7, -0.2, 0.4, 1.1, -0.5];
            let mut trace = MlpTrace::default();
            let mut grads = m.zero_grads();
            let mut x_bar = [0.0; 3];
            m.forward(&x, &mut trace);
            m.vjp(&trace, &y_bar, &mut x_bar, &mut grads);

            let scalar = |m: &MlpParams, x: &[f64]| -> f64 {
                let mut t = MlpTrace::default();
                m.forward(x, &mut t);
                t.acts.last().unwrap().iter().zip(&y_bar).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (scalar(&m, &xp) - scalar(&m, &xm)) / (2.0 * h);
                assert_relative_eq!(x_bar[i], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
            for l in 0..m.n_layers() {
                for w_idx in [0usize, m.weights[l].len() - 1] {
                    let mut mp = m.clone();
                    let mut mm = m.clone();
                    mp.weights[l][w_idx] += h;
                    mm.weights[l][w_idx] -= h;
                    let fd = (scalar(&mp, &x) - scalar(&mm, &x)) / (2.0 * h);
                    assert_relative_eq!(
                        grads.weights[l][w_idx],
                        fd,
                        max_relative = 1e-6,
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn dual_forward_matches_directional_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = net(Activation::Tanh, &mut rng);
        let x = [0.2, -0.4, 0.8];
        let x_dot = [1.0, -0.3, 0.5];
        let mut dual = MlpDualTrace::default();
        m.dual_forward(&x, &x_dot, &mut dual);
        let h = 1e-6;
        let eval = |x: &[f64]| -> Vec<f64> {
            let mut t = MlpTrace::default();
            m.forward(x, &mut t);
            t.acts.last().unwrap().clone()
        };
        let xp: Vec<f64> = x.iter().zip(&x_dot).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&x_dot).map(|(a, b)| a - h * b).collect();
        let (up, dn) = (eval(&xp), eval(&xm));
        for (o, d) in dual.dots.last().unwrap().iter().enumerate() {
            let fd = (up[o] - dn[o]) / (2.0 * h);
            assert_relative_eq!(*d, fd, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn dual_complete_bit_matches_dual_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Tanh, Activation::Relu] {
            let m = net(act, &mut rng);
            let x = [0.15, -0.35, 0.55];
            let x_dot = [-0.8, 0.6, 0.2];
            let mut whole = MlpDualTrace::default();
            m.dual_forward(&x, &x_dot, &mut whole);
            let mut split = MlpDualTrace::default();
            m.forward_acts(&x, &mut split);
            m.dual_complete(&x_dot, &mut split);
            assert_eq!(whole.acts, split.acts);
            assert_eq!(whole.dots, split.dots);
            assert_eq!(whole.z_dots, split.z_dots);
        }
    }

    #[test]
    fn dual_vjp_matches_parameter_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for act in [Activation::Tanh, Activation::Relu] {
            let m = net(act, &mut rng);
            let x = [0.25, -0.5, 0.75];
            let x_dot = [0.9, 0.4, -0.7];
            let ybv = [0.3, -0.8, 0.5, 0.2, -0.4];
            let ybd = [-0.6, 0.1, 0.9, -0.3, 0.7];
            let mut dual = MlpDualTrace::default();
            let mut grads = m.zero_grads();
            let (mut xbv, mut xbd) = ([0.0; 3], [0.0; 3]);
            m.dual_forward(&x, &x_dot, &mut dual);
            m.dual_vjp(&dual, &ybv, &ybd, &mut xbv, &mut xbd, &mut grads);

            // Objective: <ybv, y> + <ybd, y_dot>.
            let scalar_at = |m: &MlpParams, x: &[f64], x_dot: &[f64]| -> f64 {
                let mut t = MlpDualTrace::default();
                m.dual_forward(x, x_dot, &mut t);
                let v: f64 = t.acts.last().unwrap().iter().zip(&ybv).map(|(a, b)| a * b).sum();
                let d: f64 = t.dots.last().unwrap().iter().zip(&ybd).map(|(a, b)| a * b).sum();
                v + d
            };
            let scalar = |m: &MlpParams| scalar_at(m, &x, &x_dot);
            let h = 1e-6;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (scalar_at(&m, &xp, &x_dot) - scalar_at(&m, &xm, &x_dot)) / (2.0 * h);
                assert_relative_eq!(xbv[i], fd, max_relative = 5e-6, epsilon = 1e-9);
                let mut tp = x_dot;
                let mut tm = x_dot;
                tp[i] += h;
                tm[i] -= h;
                let fd = (scalar_at(&m, &x, &tp) - scalar_at(&m, &x, &tm)) / (2.0 * h);
                assert_relative_eq!(xbd[i], fd, max_relative = 5e-6, epsilon = 1e-9);
            }
            for l in 0..m.n_layers() {
                for w_idx in [0usize, m.weights[l].len() / 2, m.weights[l].len() - 1] {
                    let mut mp = m.clone();
                    let mut mm = m.clone();
                    mp.weights[l][w_idx] += h;
                    mm.weights[l][w_idx] -= h;
                    let fd = (scalar(&mp) - scalar(&mm)) / (2.0 * h);
                    assert_relative_eq!(
                        grads.weights[l][w_idx],
                        fd,
                        max_relative = 5e-6,
                        epsilon = 1e-9
                    );
                }
                for b_idx in [0usize, m.biases[l].len() - 1] {
                    let mut mp = m.clone();
                    let mut mm = m.clone();
                    mp.biases[l][b_idx] += h;
                    mm.biases[l][b_idx] -= h;
                    let fd = (scalar(&mp) - scalar(&mm)) / (2.0 * h);
                    assert_relative_eq!(
                        grads.biases[l][b_idx],
                        fd,
                        max_relative = 5e-6,
                        epsilon = 1e-9
                    );
                }
            }
        }
    }
}
