//! Per-particle fitting network: a linear projection onto the residual
//! width, six residual blocks `h <- h + tanh(W h + b)`, and a linear map
//! to a scalar energy contribution.
//!
//! Mirrors the derivative surface of [`super::mlp`]: plain VJP for
//! forces, dual forward + dual VJP for training on forces.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mlp::{matvec, matvec_nb, matvec_t_acc, outer_acc};
use crate::{Error, Result};

pub const RESIDUAL_BLOCKS: usize = 6;
pub const RESIDUAL_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittingParams {
    pub input_dim: usize,
    pub width: usize,
    /// Row-major `(width, input_dim)`.
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    /// Residual blocks, each row-major `(width, width)` plus bias.
    pub blocks: Vec<(Vec<f64>, Vec<f64>)>,
    /// Final map `(1, width)` plus scalar bias.
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

#[derive(Debug, Clone)]
pub struct FittingGrads {
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub blocks: Vec<(Vec<f64>, Vec<f64>)>,
    pub out_w: Vec<f64>,
    pub out_b: f64,
    scratch: [Vec<f64>; 4],
}

/// Saved intermediates of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct FittingTrace {
    pub x: Vec<f64>,
    /// `h[0]` after projection, `h[k+1]` after block `k`.
    pub h: Vec<Vec<f64>>,
    /// Block tanh outputs.
    pub t: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct FittingDualTrace {
    pub plain: FittingTrace,
    pub x_dot: Vec<f64>,
    pub h_dot: Vec<Vec<f64>>,
    /// Pre-activation derivatives of each block.
    pub z_dot: Vec<Vec<f64>>,
}

impl FittingParams {
    pub fn glorot(input_dim: usize, rng: &mut impl Rng) -> Self {
        let width = RESIDUAL_WIDTH;
        let draw = |n_in: usize, n_out: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let std = (2.0 / (n_in + n_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            (0..n_in * n_out).map(|_| normal.sample(rng)).collect()
        };
        Self {
            input_dim,
            width,
            proj_w: draw(input_dim, width, rng),
            proj_b: vec![0.0; width],
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|_| (draw(width, width, rng), vec![0.0; width]))
                .collect(),
            out_w: draw(width, 1, rng),
            out_b: 0.0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.proj_w.len()
            + self.proj_b.len()
            + self
                .blocks
                .iter()
                .map(|(w, b)| w.len() + b.len())
                .sum::<usize>()
            + self.out_w.len()
            + 1
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.proj_w.len() == self.width * self.input_dim
            && self.proj_b.len() == self.width
            && self.out_w.len() == self.width
            && self
                .blocks
                .iter()
                .all(|(w, b)| w.len() == self.width * self.width && b.len() == self.width);
        if !ok {
            return Err(Error::InvalidConfig(
                "fitting network tensor shapes are inconsistent".into(),
            ));
        }
        let finite = self
            .proj_w
            .iter()
            .chain(&self.proj_b)
            .chain(self.blocks.iter().flat_map(|(w, b)| w.iter().chain(b)))
            .chain(&self.out_w)
            .all(|v| v.is_finite())
            && self.out_b.is_finite();
        if !finite {
            return Err(Error::NonFinite("fitting network".into()));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> FittingGrads {
        FittingGrads {
            proj_w: vec![0.0; self.proj_w.len()],
            proj_b: vec![0.0; self.proj_b.len()],
            blocks: self
                .blocks
                .iter()
                .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect(),
            out_w: vec![0.0; self.out_w.len()],
            out_b: 0.0,
            scratch: Default::default(),
        }
    }

    pub fn forward(&self, x: &[f64], trace: &mut FittingTrace) -> f64 {
        let nb = self.blocks.len();
        trace.x.clear();
        trace.x.extend_from_slice(x);
        trace.h.resize(nb + 1, Vec::new());
        trace.t.resize(nb, Vec::new());
        trace.h[0].resize(self.width, 0.0);
        matvec(&self.proj_w, x, &self.proj_b, &mut trace.h[0]);
        for (k, (w, b)) in self.blocks.iter().enumerate() {
            let (head, tail) = trace.h.split_at_mut(k + 1);
            let prev = &head[k];
            let t = &mut trace.t[k];
            t.resize(self.width, 0.0);
            matvec(w, prev, b, t);
            for v in t.iter_mut() {
                *v = v.tanh();
            }
            let h_next = &mut tail[0];
            h_next.resize(self.width, 0.0);
            for i in 0..self.width {
                h_next[i] = prev[i] + t[i];
            }
        }
        let mut e = self.out_b;
        for (wv, hv) in self.out_w.iter().zip(&trace.h[nb]) {
            e += wv * hv;
        }
        e
    }

    /// VJP; returns the input cotangent scaled by `e_bar` and accumulates
    /// parameter cotangents.
    pub fn vjp(
        &self,
        trace: &FittingTrace,
        e_bar: f64,
        x_bar: &mut [f64],
        grads: &mut FittingGrads,
    ) {
        let nb = self.blocks.len();
        let h_last = &trace.h[nb];
        let mut h_bar = std::mem::take(&mut grads.scratch[0]);
        let mut z_bar = std::mem::take(&mut grads.scratch[1]);
        h_bar.clear();
        h_bar.extend(self.out_w.iter().map(|w| w * e_bar));
        z_bar.clear();
        z_bar.resize(self.width, 0.0);
        for (gw, hv) in grads.out_w.iter_mut().zip(h_last) {
            *gw += e_bar * hv;
        }
        grads.out_b += e_bar;
        for k in (0..nb).rev() {
            let t = &trace.t[k];
            for i in 0..self.width {
                z_bar[i] = (1.0 - t[i] * t[i]) * h_bar[i];
            }
            let (gw, gb) = &mut grads.blocks[k];
            outer_acc(gw, gb, &z_bar, &trace.h[k]);
            matvec_t_acc(&self.blocks[k].0, &z_bar, &mut h_bar);
        }
        outer_acc(&mut grads.proj_w, &mut grads.proj_b, &h_bar, &trace.x);
        for v in x_bar.iter_mut() {
            *v = 0.0;
        }
        matvec_t_acc(&self.proj_w, &h_bar, x_bar);
        grads.scratch[0] = h_bar;
        grads.scratch[1] = z_bar;
    }

    pub fn dual_forward(&self, x: &[f64], x_dot: &[f64], trace: &mut FittingDualTrace) -> (f64, f64) {
        let e = self.forward(x, &mut trace.plain);
        let e_dot = self.dual_complete(x_dot, trace);
        (e, e_dot)
    }

    /// Derivative channel of a dual pass whose value channel is already
    /// recorded in `trace.plain`; returns the directional derivative of
    /// the output.
    pub fn dual_complete(&self, x_dot: &[f64], trace: &mut FittingDualTrace) -> f64 {
        let nb = self.blocks.len();
        debug_assert_eq!(trace.plain.t.len(), nb, "value channel must be recorded first");
        trace.x_dot.clear();
        trace.x_dot.extend_from_slice(x_dot);
        trace.h_dot.resize(nb + 1, Vec::new());
        trace.z_dot.resize(nb, Vec::new());
        trace.h_dot[0].resize(self.width, 0.0);
        matvec_nb(&self.proj_w, x_dot, &mut trace.h_dot[0]);
        for (k, (w, _)) in self.blocks.iter().enumerate() {
            let (head, tail) = trace.h_dot.split_at_mut(k + 1);
            let prev = &head[k];
            let z_dot = &mut trace.z_dot[k];
            z_dot.resize(self.width, 0.0);
            matvec_nb(w, prev, z_dot);
            let t = &trace.plain.t[k];
            let h_next = &mut tail[0];
            h_next.resize(self.width, 0.0);
            for i in 0..self.width {
                h_next[i] = prev[i] + (1.0 - t[i] * t[i]) * z_dot[i];
            }
        }
        let mut e_dot = 0.0;
        for (wv, hv) in self.out_w.iter().zip(&trace.h_dot[nb]) {
            e_dot += wv * hv;
        }
        e_dot
    }

    /// VJP of the dual pass; input cotangents (both channels) are written
    /// into `x_bar_val`/`x_bar_dot`.
    pub fn dual_vjp(
        &self,
        trace: &FittingDualTrace,
        e_bar_val: f64,
        e_bar_dot: f64,
        x_bar_val: &mut [f64],
        x_bar_dot: &mut [f64],
        grads: &mut FittingGrads,
    ) {
        let nb = self.blocks.len();
        let h_last = &trace.plain.h[nb];
        let hd_last = &trace.h_dot[nb];
        let mut hb_val = std::mem::take(&mut grads.scratch[0]);
        let mut hb_dot = std::mem::take(&mut grads.scratch[1]);
        let mut zb_val = std::mem::take(&mut grads.scratch[2]);
        let mut zb_dot = std::mem::take(&mut grads.scratch[3]);
        hb_val.clear();
        hb_val.extend(self.out_w.iter().map(|w| w * e_bar_val));
        hb_dot.clear();
        hb_dot.extend(self.out_w.iter().map(|w| w * e_bar_dot));
        zb_val.clear();
        zb_val.resize(self.width, 0.0);
        zb_dot.clear();
        zb_dot.resize(self.width, 0.0);
        for i in 0..self.width {
            grads.out_w[i] += e_bar_val * h_last[i] + e_bar_dot * hd_last[i];
        }
        grads.out_b += e_bar_val;
        for k in (0..nb).rev() {
            let t = &trace.plain.t[k];
            let z_dot = &trace.z_dot[k];
            for i in 0..self.width {
                let d1 = 1.0 - t[i] * t[i];
                zb_val[i] = d1 * hb_val[i] - 2.0 * t[i] * d1 * z_dot[i] * hb_dot[i];
                zb_dot[i] = d1 * hb_dot[i];
            }
            let (gw, gb) = &mut grads.blocks[k];
            outer_acc(gw, gb, &zb_val, &trace.plain.h[k]);
            for (o, &bd) in zb_dot.iter().enumerate() {
                if bd == 0.0 {
                    continue;
                }
                let row = &mut gw[o * self.width..(o + 1) * self.width];
                for (wv, xv) in row.iter_mut().zip(&trace.h_dot[k]) {
                    *wv += bd * xv;
                }
            }
            matvec_t_acc(&self.blocks[k].0, &zb_val, &mut hb_val);
            matvec_t_acc(&self.blocks[k].0, &zb_dot, &mut hb_dot);
        }
        outer_acc(&mut grads.proj_w, &mut grads.proj_b, &hb_val, &trace.plain.x);
        let n_in = self.input_dim;
        for (o, &bd) in hb_dot.iter().enumerate() {
            if bd == 0.0 {
                continue;
            }
            let row = &mut grads.proj_w[o * n_in..(o + 1) * n_in];
            for (wv, xv) in row.iter_mut().zip(&trace.x_dot) {
                *wv += bd * xv;
            }
        }
        for v in x_bar_val.iter_mut() {
            *v = 0.0;
        }
        for v in x_bar_dot.iter_mut() {
            *v = 0.0;
        }
        matvec_t_acc(&self.proj_w, &hb_val, x_bar_val);
        matvec_t_acc(&self.proj_w, &hb_dot, x_bar_dot);
        grads.scratch[0] = hb_val;
        grads.scratch[1] = hb_dot;
        grads.scratch[2] = zb_val;
        grads.scratch[3] = zb_dot;
    }
}
