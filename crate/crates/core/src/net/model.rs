//! The neural potential: descriptors, fitting network, energies, forces,
//! and the training loss with its parameter gradients.
//!
//! Evaluation composes three parameter-bearing blocks. Two short-range
//! nets turn pair coordinates into a per-particle descriptor pair
//! `D1_i = sum_j f1(geom_ij) r_hat_ij`, `D2_i = sum_j f2(r_hat_ij) r_hat_ij`
//! over the interaction list. In full-range mode the fast periodic
//! convolution adds per-channel potential traces `u_c(x_i)` that are
//! standardized and mapped through a third net into long-range features.
//! A residual fitting network maps the concatenated features to a
//! per-particle energy; forces are the exact negative gradient via
//! hand-written reverse passes.
//!
//! The force-matching loss is differentiated by seeding a directional
//! derivative of the energy with the force residual (exact for squared
//! residuals) and reversing over that dual computation, so every block
//! supplies forward, dual-forward, VJP and dual-VJP passes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coords::{NormStats, PairCoords, PairCoordsDual};
use super::fitting::{FittingDualTrace, FittingParams, FittingTrace};
use super::mlp::{Activation, MlpDualTrace, MlpGrads, MlpParams, MlpTrace};
use super::neighbors::build_interaction_lists;
use crate::dataset::Snapshot;
use crate::domain::Domain;
use crate::nufft::{MultiplierParams, NufftPlan};
use crate::{Error, Result};

/// Snapshots used to estimate normalization statistics.
pub const CALIBRATION_SNAPSHOTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    ShortRange,
    FullRange,
}

/// Descriptor geometry and widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    /// Interaction radius; must stay below half the box length.
    pub r_cut: f64,
    /// Neighbor tensor width.
    pub n_max_neigh: usize,
    /// Total short-range feature count (two halves).
    pub m_sr: usize,
    /// Long-range feature count.
    pub m_lr: usize,
    /// Convolution channels.
    pub k_chnls: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            r_cut: 1.5,
            n_max_neigh: 64,
            m_sr: 64,
            m_lr: 32,
            k_chnls: 2,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_cut.is_finite() && self.r_cut > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "interaction radius must be positive, got {}",
                self.r_cut
            )));
        }
        if self.n_max_neigh == 0 {
            return Err(Error::InvalidConfig("neighbor width must be positive".into()));
        }
        if self.m_sr < 4 || self.m_sr % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "short-range feature count must be even and at least 4, got {}",
                self.m_sr
            )));
        }
        if self.m_lr < 2 {
            return Err(Error::InvalidConfig(format!(
                "long-range feature count must be at least 2, got {}",
                self.m_lr
            )));
        }
        if self.k_chnls == 0 {
            return Err(Error::InvalidConfig("channel count must be positive".into()));
        }
        Ok(())
    }
}

/// Widths of a descriptor net: the output width halves four times toward
/// the input (floored at 2), e.g. `(1, 32)` gives `[1, 2, 4, 8, 16, 32]`.
pub fn ladder_widths(input: usize, output: usize) -> Vec<usize> {
    let mut widths = Vec::with_capacity(6);
    widths.push(input);
    for shift in (1..5).rev() {
        widths.push((output >> shift).max(2));
    }
    widths.push(output);
    widths
}

/// All trainable state plus the frozen normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mode: Mode,
    pub cfg: DescriptorConfig,
    pub d: usize,
    pub norm: NormStats,
    pub sr1: MlpParams,
    pub sr2: MlpParams,
    pub lr: Option<MlpParams>,
    pub multiplier: Option<MultiplierParams>,
    pub fitting: FittingParams,
}

/// Gradient accumulator shaped like the trainable part of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub sr1: MlpGrads,
    pub sr2: MlpGrads,
    pub lr: Option<MlpGrads>,
    pub fitting: super::fitting::FittingGrads,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnergyForces {
    pub energy: f64,
    /// Flattened `(n, d)`.
    pub forces: Vec<f64>,
}

impl ModelParams {
    /// Fresh Glorot-initialized model. Draw order is fixed (sr nets, then
    /// the long-range net in full-range mode, then the fitting net), so a
    /// seed pins every weight.
    pub fn init(mode: Mode, cfg: &DescriptorConfig, d: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidConfig(format!(
                "dimension must be 1, 2 or 3, got {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = cfg.m_sr / 2;
        let sr1 = MlpParams::glorot(&ladder_widths(d, half), Activation::Tanh, &mut rng);
        let sr2 = MlpParams::glorot(&ladder_widths(1, half), Activation::Tanh, &mut rng);
        let (lr, multiplier, norm, fit_in) = match mode {
            Mode::ShortRange => (None, None, NormStats::identity(0), cfg.m_sr),
            Mode::FullRange => (
                Some(MlpParams::glorot(
                    &ladder_widths(cfg.k_chnls, cfg.m_lr),
                    Activation::Relu,
                    &mut rng,
                )),
                Some(MultiplierParams::ones(cfg.k_chnls)),
                NormStats::identity(cfg.k_chnls),
                cfg.m_sr + cfg.m_lr,
            ),
        };
        let fitting = FittingParams::glorot(fit_in, &mut rng);
        let model = Self {
            mode,
            cfg: *cfg,
            d,
            norm,
            sr1,
            sr2,
            lr,
            multiplier,
            fitting,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.norm.validate()?;
        if !(1..=3).contains(&self.d) {
            return Err(Error::InvalidConfig(format!(
                "dimension must be 1, 2 or 3, got {}",
                self.d
            )));
        }
        let half = self.cfg.m_sr / 2;
        self.sr1.validate()?;
        self.sr2.validate()?;
        self.fitting.validate()?;
        if self.sr1.input_dim() != self.d || self.sr1.output_dim() != half {
            return Err(Error::InvalidConfig(
                "first short-range net does not match the descriptor shape".into(),
            ));
        }
        if self.sr2.input_dim() != 1 || self.sr2.output_dim() != half {
            return Err(Error::InvalidConfig(
                "second short-range net does not match the descriptor shape".into(),
            ));
        }
        match self.mode {
            Mode::ShortRange => {
                if self.lr.is_some() || self.multiplier.is_some() {
                    return Err(Error::InvalidConfig(
                        "short-range models carry no long-range blocks".into(),
                    ));
                }
                if !self.norm.u_mean.is_empty() {
                    return Err(Error::InvalidConfig(
                        "short-range models carry no channel statistics".into(),
                    ));
                }
                if self.fitting.input_dim != self.cfg.m_sr {
                    return Err(Error::InvalidConfig(
                        "fitting input width must equal the short-range feature count".into(),
                    ));
                }
            }
            Mode::FullRange => {
                let lr = self.lr.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("full-range model is missing the long-range net".into())
                })?;
                let mult = self.multiplier.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("full-range model is missing the multiplier".into())
                })?;
                lr.validate()?;
                mult.validate()?;
                if lr.input_dim() != self.cfg.k_chnls || lr.output_dim() != self.cfg.m_lr {
                    return Err(Error::InvalidConfig(
                        "long-range net does not match the descriptor shape".into(),
                    ));
                }
                if mult.channels() != self.cfg.k_chnls {
                    return Err(Error::InvalidConfig(
                        "multiplier channel count disagrees with the descriptor config".into(),
                    ));
                }
                if self.norm.u_mean.len() != self.cfg.k_chnls {
                    return Err(Error::InvalidConfig(
                        "channel statistics must cover every channel".into(),
                    ));
                }
                if self.fitting.input_dim != self.cfg.m_sr + self.cfg.m_lr {
                    return Err(Error::InvalidConfig(
                        "fitting input width must equal the total feature count".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Warm start of a full-range model from a short-range one: the
    /// short-range nets are copied, the long-range net is freshly drawn,
    /// the multiplier starts at ones, and the fitting projection gains
    /// zero columns for the new features. Zero columns make the embedded
    /// model bit-identical to the source on every input.
    pub fn embed(&self, seed: u64) -> Result<Self> {
        if self.mode != Mode::ShortRange {
            return Err(Error::InvalidConfig(
                "only a short-range model can be embedded".into(),
            ));
        }
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr = MlpParams::glorot(
            &ladder_widths(cfg.k_chnls, cfg.m_lr),
            Activation::Relu,
            &mut rng,
        );
        let width = self.fitting.width;
        let mut proj_w = Vec::with_capacity(width * (cfg.m_sr + cfg.m_lr));
        for o in 0..width {
            proj_w.extend_from_slice(&self.fitting.proj_w[o * cfg.m_sr..(o + 1) * cfg.m_sr]);
            proj_w.extend(std::iter::repeat(0.0).take(cfg.m_lr));
        }
        let fitting = FittingParams {
            input_dim: cfg.m_sr + cfg.m_lr,
            width,
            proj_w,
            proj_b: self.fitting.proj_b.clone(),
            blocks: self.fitting.blocks.clone(),
            out_w: self.fitting.out_w.clone(),
            out_b: self.fitting.out_b,
        };
        let mut norm = self.norm.clone();
        norm.u_mean = vec![0.0; cfg.k_chnls];
        norm.u_std = vec![1.0; cfg.k_chnls];
        let model = Self {
            mode: Mode::FullRange,
            cfg,
            d: self.d,
            norm,
            sr1: self.sr1.clone(),
            sr2: self.sr2.clone(),
            lr: Some(lr),
            multiplier: Some(MultiplierParams::ones(cfg.k_chnls)),
            fitting,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        let mut n = self.sr1.n_params() + self.sr2.n_params() + self.fitting.n_params();
        if let Some(lr) = &self.lr {
            n += lr.n_params();
        }
        if let Some(m) = &self.multiplier {
            n += 2 * m.channels();
        }
        n
    }

    /// Stable flattening order: sr1 layers (weights then bias), sr2,
    /// long-range net, fitting (projection, blocks, output), multiplier
    /// (beta then lambda). [`ModelGrads::flatten`] mirrors it.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        push_mlp(&self.sr1, &mut out);
        push_mlp(&self.sr2, &mut out);
        if let Some(lr) = &self.lr {
            push_mlp(lr, &mut out);
        }
        let f = &self.fitting;
        out.extend_from_slice(&f.proj_w);
        out.extend_from_slice(&f.proj_b);
        for (w, b) in &f.blocks {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&f.out_w);
        out.push(f.out_b);
        if let Some(m) = &self.multiplier {
            out.extend_from_slice(&m.beta);
            out.extend_from_slice(&m.lambda);
        }
        out
    }

    /// Inverse of [`Self::flatten`].
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
                context: "flattened parameter vector".into(),
            });
        }
        let mut cur = 0usize;
        pull_mlp(&mut self.sr1, flat, &mut cur);
        pull_mlp(&mut self.sr2, flat, &mut cur);
        if let Some(lr) = &mut self.lr {
            pull_mlp(lr, flat, &mut cur);
        }
        let f = &mut self.fitting;
        pull(&mut f.proj_w, flat, &mut cur);
        pull(&mut f.proj_b, flat, &mut cur);
        for (w, b) in &mut f.blocks {
            pull(w, flat, &mut cur);
            pull(b, flat, &mut cur);
        }
        pull(&mut f.out_w, flat, &mut cur);
        f.out_b = flat[cur];
        cur += 1;
        if let Some(m) = &mut self.multiplier {
            pull(&mut m.beta, flat, &mut cur);
            pull(&mut m.lambda, flat, &mut cur);
        }
        debug_assert_eq!(cur, flat.len());
        Ok(())
    }
}

fn push_mlp(m: &MlpParams, out: &mut Vec<f64>) {
    for l in 0..m.n_layers() {
        out.extend_from_slice(&m.weights[l]);
        out.extend_from_slice(&m.biases[l]);
    }
}

fn pull(dst: &mut [f64], flat: &[f64], cur: &mut usize) {
    dst.copy_from_slice(&flat[*cur..*cur + dst.len()]);
    *cur += dst.len();
}

fn pull_mlp(m: &mut MlpParams, flat: &[f64], cur: &mut usize) {
    for l in 0..m.weights.len() {
        pull(&mut m.weights[l], flat, cur);
        pull(&mut m.biases[l], flat, cur);
    }
}

impl ModelGrads {
    pub fn zeros(p: &ModelParams) -> Self {
        Self {
            sr1: p.sr1.zero_grads(),
            sr2: p.sr2.zero_grads(),
            lr: p.lr.as_ref().map(|m| m.zero_grads()),
            fitting: p.fitting.zero_grads(),
            beta: vec![0.0; p.multiplier.as_ref().map_or(0, |m| m.channels())],
            lambda: vec![0.0; p.multiplier.as_ref().map_or(0, |m| m.channels())],
        }
    }

    /// Same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_mlp_grads(&self.sr1, &mut out);
        push_mlp_grads(&self.sr2, &mut out);
        if let Some(lr) = &self.lr {
            push_mlp_grads(lr, &mut out);
        }
        let f = &self.fitting;
        out.extend_from_slice(&f.proj_w);
        out.extend_from_slice(&f.proj_b);
        for (w, b) in &f.blocks {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&f.out_w);
        out.push(f.out_b);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.lambda);
        out
    }
}

fn push_mlp_grads(g: &MlpGrads, out: &mut Vec<f64>) {
    for l in 0..g.weights.len() {
        out.extend_from_slice(&g.weights[l]);
        out.extend_from_slice(&g.biases[l]);
    }
}

fn check_plan<'a>(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&'a NufftPlan>,
) -> Result<Option<&'a NufftPlan>> {
    if dom.dim() != params.d {
        return Err(Error::DimensionMismatch {
            expected: params.d,
            got: dom.dim(),
            context: "model and domain dimension".into(),
        });
    }
    match params.mode {
        Mode::ShortRange => Ok(None),
        Mode::FullRange => {
            let p = plan.ok_or_else(|| {
                Error::InvalidConfig("full-range evaluation needs a transform plan".into())
            })?;
            if p.domain().dim() != dom.dim() || p.domain().length() != dom.length() {
                return Err(Error::ModelMismatch(
                    "transform plan was built for a different domain".into(),
                ));
            }
            Ok(Some(p))
        }
    }
}

/// Total energy of a configuration.
pub fn energy(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    positions: &[f64],
) -> Result<f64> {
    Ok(eval(params, dom, plan, positions, false)?.energy)
}

/// Total energy and exact forces `F = -grad U`.
pub fn energy_forces(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    positions: &[f64],
) -> Result<EnergyForces> {
    eval(params, dom, plan, positions, true)
}

fn eval(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    positions: &[f64],
    with_forces: bool,
) -> Result<EnergyForces> {
    let d = params.d;
    let plan = check_plan(params, dom, plan)?;
    if positions.is_empty() || positions.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: positions.len(),
            context: "positions must hold d coordinates per particle".into(),
        });
    }
    let n = positions.len() / d;
    let cfg = &params.cfg;
    let half = cfg.m_sr / 2;
    let full = params.mode == Mode::FullRange;
    let k = if full { cfg.k_chnls } else { 0 };
    let lists = build_interaction_lists(positions, dom, cfg.r_cut, cfg.n_max_neigh)?;

    let f_ones = vec![1.0; n];
    let mut u_hat = vec![0.0; n * k];
    if full {
        let p = plan.unwrap();
        let mp = params.multiplier.as_ref().unwrap();
        let u = p.lrc_forward(positions, &f_ones, mp)?;
        for i in 0..n {
            for c in 0..k {
                u_hat[i * k + c] = (u[[i, c]] - params.norm.u_mean[c]) / params.norm.u_std[c];
            }
        }
    }

    let fit_in = params.fitting.input_dim;
    let mut row = vec![0.0; fit_in];
    let mut row_bar = vec![0.0; fit_in];
    // One trace slot per neighbor: the force sweep reuses the stored
    // forward passes instead of recomputing them.
    let n_slots = cfg.n_max_neigh;
    let mut t1s: Vec<MlpTrace> = (0..n_slots).map(|_| MlpTrace::default()).collect();
    let mut t2s: Vec<MlpTrace> = (0..n_slots).map(|_| MlpTrace::default()).collect();
    let mut pcs: Vec<PairCoords> = Vec::with_capacity(n_slots);
    let mut deltas: Vec<[f64; 3]> = Vec::with_capacity(n_slots);
    let mut lr_trace = MlpTrace::default();
    let mut fit_trace = FittingTrace::default();
    // Forces need no parameter cotangents; sink them.
    let mut fit_sink = params.fitting.zero_grads();
    let mut sr1_sink = params.sr1.zero_grads();
    let mut sr2_sink = params.sr2.zero_grads();
    let mut lr_sink = params.lr.as_ref().map(|m| m.zero_grads());
    let mut y_bar = vec![0.0; half];
    let mut uhat_bar = vec![0.0; k];
    let mut in1_bar = [0.0f64; 3];
    let mut rhat_in_bar = [0.0f64; 1];
    let mut delta = [0.0f64; 3];
    let mut delta_bar = [0.0f64; 3];
    let mut u_bar = vec![0.0; n * k];
    let mut x_bar = vec![0.0; n * d];
    let mut energy = 0.0;

    for i in 0..n {
        row.fill(0.0);
        pcs.clear();
        deltas.clear();
        let xi = &positions[i * d..(i + 1) * d];
        for (slot, &j) in lists.neighbors(i).iter().enumerate() {
            let xj = &positions[j * d..(j + 1) * d];
            dom.displacement(xi, xj, &mut delta[..d]);
            let pc = PairCoords::compute(d, &delta, &params.norm);
            let t1 = &mut t1s[slot];
            let t2 = &mut t2s[slot];
            params.sr1.forward(&pc.in1[..d], t1);
            params.sr2.forward(&[pc.r_hat], t2);
            let y = t1.acts.last().unwrap();
            let z = t2.acts.last().unwrap();
            for o in 0..half {
                row[o] += y[o] * pc.r_hat;
                row[half + o] += z[o] * pc.r_hat;
            }
            pcs.push(pc);
            deltas.push(delta);
        }
        if full {
            let lrm = params.lr.as_ref().unwrap();
            lrm.forward(&u_hat[i * k..(i + 1) * k], &mut lr_trace);
            row[cfg.m_sr..].copy_from_slice(lr_trace.acts.last().unwrap());
        }
        energy += params.fitting.forward(&row, &mut fit_trace);

        if !with_forces {
            continue;
        }
        params.fitting.vjp(&fit_trace, 1.0, &mut row_bar, &mut fit_sink);
        if full {
            let lrm = params.lr.as_ref().unwrap();
            lrm.vjp(
                &lr_trace,
                &row_bar[cfg.m_sr..],
                &mut uhat_bar,
                lr_sink.as_mut().unwrap(),
            );
            for c in 0..k {
                u_bar[i * k + c] = uhat_bar[c] / params.norm.u_std[c];
            }
        }
        let (d1_bar, rest) = row_bar.split_at(half);
        let d2_bar = &rest[..half];
        for (slot, &j) in lists.neighbors(i).iter().enumerate() {
            let pc = &pcs[slot];
            for o in 0..half {
                y_bar[o] = pc.r_hat * d1_bar[o];
            }
            params.sr1.vjp(&t1s[slot], &y_bar, &mut in1_bar[..d], &mut sr1_sink);
            for o in 0..half {
                y_bar[o] = pc.r_hat * d2_bar[o];
            }
            params.sr2.vjp(&t2s[slot], &y_bar, &mut rhat_in_bar[..], &mut sr2_sink);
            let y = t1s[slot].acts.last().unwrap();
            let z = t2s[slot].acts.last().unwrap();
            let mut r_bar = rhat_in_bar[0];
            for o in 0..half {
                r_bar += d1_bar[o] * y[o] + d2_bar[o] * z[o];
            }
            pc.backward(
                d,
                &deltas[slot][..d],
                &in1_bar[..d],
                r_bar,
                &params.norm,
                &mut delta_bar[..d],
            );
            for a in 0..d {
                x_bar[i * d + a] += delta_bar[a];
                x_bar[j * d + a] -= delta_bar[a];
            }
        }
    }

    let mut forces = Vec::new();
    if with_forces {
        if full {
            let p = plan.unwrap();
            let mp = params.multiplier.as_ref().unwrap();
            let ub = Array2::from_shape_vec((n, k), u_bar).unwrap();
            let g = p.lrc_backward(positions, &f_ones, mp, &ub)?;
            for i in 0..n {
                for a in 0..d {
                    x_bar[i * d + a] += g.x_bar[[i, a]];
                }
            }
        }
        forces = x_bar.iter().map(|v| -v).collect();
    }
    Ok(EnergyForces { energy, forces })
}

/// Mean force-matching loss over a batch plus the gradient with respect
/// to every trainable parameter (flattened in [`ModelParams::flatten`]
/// order). Per-snapshot work runs in parallel; the reduction is an
/// ordered sum over the batch, so results do not depend on thread count.
pub fn loss_and_param_gradients(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    batch: &[Snapshot],
    w_energy: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("loss needs a non-empty batch".into()));
    }
    check_plan(params, dom, plan)?;
    let per_snapshot: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map_init(TrainScratch::default, |scratch, snap| {
            snapshot_loss_grad(params, dom, plan, snap, w_energy, scratch)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.n_params()];
    for res in per_snapshot {
        let (l, g) = res?;
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("batch loss is {loss}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss("a parameter gradient is not finite".into()));
    }
    Ok((loss, grad))
}

/// Reusable per-worker training buffers: dual traces for every pair and
/// particle of a snapshot, kept across snapshots so the inner vectors
/// allocate only on first use.
#[derive(Default)]
struct TrainScratch {
    dt1s: Vec<MlpDualTrace>,
    dt2s: Vec<MlpDualTrace>,
    dlrs: Vec<MlpDualTrace>,
    dfits: Vec<FittingDualTrace>,
    deltas: Vec<[f64; 3]>,
}

impl TrainScratch {
    fn ensure(&mut self, n: usize, n_slots: usize, full: bool) {
        let pairs = n * n_slots;
        if self.dt1s.len() < pairs {
            self.dt1s.resize_with(pairs, Default::default);
        }
        if self.dt2s.len() < pairs {
            self.dt2s.resize_with(pairs, Default::default);
        }
        if self.deltas.len() < pairs {
            self.deltas.resize(pairs, [0.0; 3]);
        }
        if self.dfits.len() < n {
            self.dfits.resize_with(n, Default::default);
        }
        if full && self.dlrs.len() < n {
            self.dlrs.resize_with(n, Default::default);
        }
    }
}

/// One snapshot's loss and flattened parameter gradient.
///
/// Two sweeps share one set of recorded forward traces. The plain sweep
/// records every forward pass and reverses it for the forces; the force
/// residual then seeds a directional derivative, and completing the
/// stored traces with that derivative channel feeds the dual VJPs whose
/// cotangents are exactly the gradient of the squared force error. The
/// energy term rides along through the value cotangent.
fn snapshot_loss_grad(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    snap: &Snapshot,
    w_energy: f64,
    scratch: &mut TrainScratch,
) -> Result<(f64, Vec<f64>)> {
    let d = params.d;
    let positions = &snap.positions;
    if snap.forces.len() != positions.len() {
        return Err(Error::DatasetFormat(format!(
            "snapshot has {} force components for {} coordinates",
            snap.forces.len(),
            positions.len()
        )));
    }
    let plan = check_plan(params, dom, plan)?;
    if positions.is_empty() || positions.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: positions.len(),
            context: "positions must hold d coordinates per particle".into(),
        });
    }
    let n = positions.len() / d;
    let cfg = &params.cfg;
    let half = cfg.m_sr / 2;
    let full = params.mode == Mode::FullRange;
    let k = if full { cfg.k_chnls } else { 0 };
    let lists = build_interaction_lists(positions, dom, cfg.r_cut, cfg.n_max_neigh)?;
    let n_slots = cfg.n_max_neigh;
    scratch.ensure(n, n_slots, full);
    let mut grads = ModelGrads::zeros(params);

    let f_ones = vec![1.0; n];
    let mut u_hat = vec![0.0; n * k];
    let lrc_cache = if full {
        let p = plan.unwrap();
        let mp = params.multiplier.as_ref().unwrap();
        let cache = p.spread_cache(positions)?;
        let u = p.lrc_forward_cached(&cache, &f_ones, mp)?;
        for i in 0..n {
            for c in 0..k {
                u_hat[i * k + c] = (u[[i, c]] - params.norm.u_mean[c]) / params.norm.u_std[c];
            }
        }
        Some(cache)
    } else {
        None
    };

    // Plain sweep. Parameter cotangents are discarded here (sinks): only
    // the position cotangent is needed to get the forces.
    let fit_in = params.fitting.input_dim;
    let mut row = vec![0.0; fit_in];
    let mut row_bar = vec![0.0; fit_in];
    let mut fit_sink = params.fitting.zero_grads();
    let mut sr1_sink = params.sr1.zero_grads();
    let mut sr2_sink = params.sr2.zero_grads();
    let mut lr_sink = params.lr.as_ref().map(|m| m.zero_grads());
    let mut y_bar = vec![0.0; half];
    let mut uhat_bar = vec![0.0; k];
    let mut in1_bar = [0.0f64; 3];
    let mut rhat_in_bar = [0.0f64; 1];
    let mut delta = [0.0f64; 3];
    let mut delta_bar = [0.0f64; 3];
    let mut pcs: Vec<PairCoords> = Vec::with_capacity(n_slots);
    let mut u_bar = Array2::zeros((n, k));
    let mut x_bar = vec![0.0; n * d];
    let mut energy = 0.0;

    for i in 0..n {
        row.fill(0.0);
        pcs.clear();
        let xi = &positions[i * d..(i + 1) * d];
        let base = i * n_slots;
        for (slot, &j) in lists.neighbors(i).iter().enumerate() {
            let xj = &positions[j * d..(j + 1) * d];
            dom.displacement(xi, xj, &mut delta[..d]);
            let pc = PairCoords::compute(d, &delta, &params.norm);
            let dt1 = &mut scratch.dt1s[base + slot];
            let dt2 = &mut scratch.dt2s[base + slot];
            params.sr1.forward_acts(&pc.in1[..d], dt1);
            params.sr2.forward_acts(&[pc.r_hat], dt2);
            let y = dt1.acts.last().unwrap();
            let z = dt2.acts.last().unwrap();
            for o in 0..half {
                row[o] += y[o] * pc.r_hat;
                row[half + o] += z[o] * pc.r_hat;
            }
            scratch.deltas[base + slot] = delta;
            pcs.push(pc);
        }
        if full {
            let lrm = params.lr.as_ref().unwrap();
            let dlr = &mut scratch.dlrs[i];
            lrm.forward_acts(&u_hat[i * k..(i + 1) * k], dlr);
            row[cfg.m_sr..].copy_from_slice(dlr.acts.last().unwrap());
        }
        energy += params.fitting.forward(&row, &mut scratch.dfits[i].plain);

        params
            .fitting
            .vjp(&scratch.dfits[i].plain, 1.0, &mut row_bar, &mut fit_sink);
        if full {
            let lrm = params.lr.as_ref().unwrap();
            lrm.vjp_acts(
                &scratch.dlrs[i],
                &row_bar[cfg.m_sr..],
                &mut uhat_bar,
                lr_sink.as_mut().unwrap(),
            );
            for c in 0..k {
                u_bar[[i, c]] = uhat_bar[c] / params.norm.u_std[c];
            }
        }
        let (d1_bar, rest) = row_bar.split_at(half);
        let d2_bar = &rest[..half];
        for (slot, &j) in lists.neighbors(i).iter().enumerate() {
            let pc = &pcs[slot];
            for o in 0..half {
                y_bar[o] = pc.r_hat * d1_bar[o];
            }
            params.sr1.vjp_acts(
                &scratch.dt1s[base + slot],
                &y_bar,
                &mut in1_bar[..d],
                &mut sr1_sink,
            );
            for o in 0..half {
                y_bar[o] = pc.r_hat * d2_bar[o];
            }
            params.sr2.vjp_acts(
                &scratch.dt2s[base + slot],
                &y_bar,
                &mut rhat_in_bar[..],
                &mut sr2_sink,
            );
            let y = scratch.dt1s[base + slot].acts.last().unwrap();
            let z = scratch.dt2s[base + slot].acts.last().unwrap();
            let mut r_bar = rhat_in_bar[0];
            for o in 0..half {
                r_bar += d1_bar[o] * y[o] + d2_bar[o] * z[o];
            }
            pc.backward(
                d,
                &scratch.deltas[base + slot][..d],
                &in1_bar[..d],
                r_bar,
                &params.norm,
                &mut delta_bar[..d],
            );
            for a in 0..d {
                x_bar[i * d + a] += delta_bar[a];
                x_bar[j * d + a] -= delta_bar[a];
            }
        }
    }
    if let Some(cache) = &lrc_cache {
        let p = plan.unwrap();
        let mp = params.multiplier.as_ref().unwrap();
        let g = p.lrc_backward_cached(cache, &f_ones, mp, &u_bar)?;
        for i in 0..n {
            for a in 0..d {
                x_bar[i * d + a] += g.x_bar[[i, a]];
            }
        }
    }

    let delta_u = energy - snap.energy;
    let mut loss = w_energy * delta_u * delta_u;
    // Seeding the energy's directional derivative with twice the force
    // residual makes its negative parameter gradient exactly the gradient
    // of the squared force error.
    let mut x_dot = vec![0.0; n * d];
    for m in 0..n * d {
        let r = -x_bar[m] - snap.forces[m];
        loss += r * r;
        x_dot[m] = 2.0 * r;
    }

    let mut u_hat_dot = vec![0.0; n * k];
    let lrc_state = if let Some(cache) = &lrc_cache {
        let p = plan.unwrap();
        let mp = params.multiplier.as_ref().unwrap();
        let state = p.lrc_dual_forward_cached(cache, &f_ones, mp, &x_dot)?;
        for i in 0..n {
            for c in 0..k {
                u_hat_dot[i * k + c] = state.u_dot[[i, c]] / params.norm.u_std[c];
            }
        }
        Some(state)
    } else {
        None
    };

    let e_bar_val = 2.0 * w_energy * delta_u;
    let e_bar_dot = -1.0;

    // Dual sweep: complete the stored traces with the derivative channel
    // along x_dot, then run the dual VJPs into the real accumulators.
    let mut rowd = vec![0.0; fit_in];
    let mut rowv_bar = vec![0.0; fit_in];
    let mut rowd_bar = vec![0.0; fit_in];
    let mut pcds: Vec<PairCoordsDual> = Vec::with_capacity(n_slots);
    let mut ybv = vec![0.0; half];
    let mut ybd = vec![0.0; half];
    let mut uhbv = vec![0.0; k];
    let mut uhbd = vec![0.0; k];
    let mut in_bv = [0.0f64; 3];
    let mut in_bd = [0.0f64; 3];
    let mut r_in_bv = [0.0f64; 1];
    let mut r_in_bd = [0.0f64; 1];
    let mut delta_dot = [0.0f64; 3];
    let mut u_bar_val = Array2::zeros((n, k));
    let mut u_bar_dot = Array2::zeros((n, k));

    for i in 0..n {
        rowd.fill(0.0);
        pcds.clear();
        let xdi = &x_dot[i * d..(i + 1) * d];
        let base = i * n_slots;
        for (slot, &j) in lists.neighbors(i).iter().enumerate() {
            let xdj = &x_dot[j * d..(j + 1) * d];
            for a in 0..d {
                delta_dot[a] = xdi[a] - xdj[a];
            }
            let pcd = PairCoordsDual::compute(
                d,
                &scratch.deltas[base + slot][..d],
                &delta_dot,
                &params.norm,
            );
            params
                .sr1
                .dual_complete(&pcd.in1_dot[..d], &mut scratch.dt1s[base + slot]);
            params
                .sr2
                .dual_complete(&[pcd.r_hat_dot], &mut scratch.dt2s[base + slot]);
            let dt1 = &scratch.dt1s[base + slot];
            let dt2 = &scratch.dt2s[base + slot];
            let (r, rd) = (pcd.plain.r_hat, pcd.r_hat_dot);
            let y = dt1.acts.last().unwrap();
            let yd = dt1.dots.last().unwrap();
            let z = dt2.acts.last().unwrap();
            let zd = dt2.dots.last().unwrap();
            for o in 0..half {
                rowd[o] += yd[o] * r + y[o] * rd;
                rowd[half + o] += zd[o] * r + z[o] * rd;
            }
            pcds.push(pcd);
        }
        if full {
            let lrm = params.lr.as_ref().unwrap();
            lrm.dual_complete(&u_hat_dot[i * k..(i + 1) * k], &mut scratch.dlrs[i]);
            rowd[cfg.m_sr..].copy_from_slice(scratch.dlrs[i].dots.last().unwrap());
        }
        params.fitting.dual_complete(&rowd, &mut scratch.dfits[i]);
        params.fitting.dual_vjp(
            &scratch.dfits[i],
            e_bar_val,
            e_bar_dot,
            &mut rowv_bar,
            &mut rowd_bar,
            &mut grads.fitting,
        );
        if full {
            let lrm = params.lr.as_ref().unwrap();
            lrm.dual_vjp(
                &scratch.dlrs[i],
                &rowv_bar[cfg.m_sr..],
                &rowd_bar[cfg.m_sr..],
                &mut uhbv,
                &mut uhbd,
                grads.lr.as_mut().unwrap(),
            );
            for c in 0..k {
                u_bar_val[[i, c]] = uhbv[c] / params.norm.u_std[c];
                u_bar_dot[[i, c]] = uhbd[c] / params.norm.u_std[c];
            }
        }
        let d1bv = &rowv_bar[..half];
        let d1bd = &rowd_bar[..half];
        let d2bv = &rowv_bar[half..cfg.m_sr];
        let d2bd = &rowd_bar[half..cfg.m_sr];
        for (slot, pcd) in pcds.iter().enumerate() {
            let (r, rd) = (pcd.plain.r_hat, pcd.r_hat_dot);
            for o in 0..half {
                ybv[o] = r * d1bv[o] + rd * d1bd[o];
                ybd[o] = r * d1bd[o];
            }
            params.sr1.dual_vjp(
                &scratch.dt1s[base + slot],
                &ybv,
                &ybd,
                &mut in_bv[..d],
                &mut in_bd[..d],
                &mut grads.sr1,
            );
            for o in 0..half {
                ybv[o] = r * d2bv[o] + rd * d2bd[o];
                ybd[o] = r * d2bd[o];
            }
            params.sr2.dual_vjp(
                &scratch.dt2s[base + slot],
                &ybv,
                &ybd,
                &mut r_in_bv[..],
                &mut r_in_bd[..],
                &mut grads.sr2,
            );
        }
    }

    if let (Some(cache), Some(state)) = (&lrc_cache, &lrc_state) {
        let p = plan.unwrap();
        let dg = p.lrc_dual_backward(cache, state, &u_bar_val, &u_bar_dot)?;
        for c in 0..k {
            grads.beta[c] += dg.beta_bar[c];
            grads.lambda[c] += dg.lambda_bar[c];
        }
    }
    Ok((loss, grads.flatten()))
}

/// Relative force error `sqrt(sum |F_model - F_ref|^2 / sum |F_ref|^2)`
/// over a snapshot set.
pub fn relative_l2_error(
    params: &ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    snapshots: &[Snapshot],
) -> Result<f64> {
    if snapshots.is_empty() {
        return Err(Error::InvalidConfig("error metric needs snapshots".into()));
    }
    check_plan(params, dom, plan)?;
    let parts: Vec<Result<(f64, f64)>> = snapshots
        .par_iter()
        .map(|snap| {
            let ef = eval(params, dom, plan, &snap.positions, true)?;
            if snap.forces.len() != ef.forces.len() {
                return Err(Error::DatasetFormat(
                    "snapshot force length disagrees with its positions".into(),
                ));
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for (m, f_ref) in ef.forces.iter().zip(&snap.forces) {
                let r = m - f_ref;
                num += r * r;
                den += f_ref * f_ref;
            }
            Ok((num, den))
        })
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for p in parts {
        let (a, b) = p?;
        num += a;
        den += b;
    }
    if den <= 0.0 {
        return Err(Error::ZeroDenominator(
            "reference forces vanish on the evaluation set".into(),
        ));
    }
    Ok((num / den).sqrt())
}

fn accumulate(acc: &mut (f64, f64, usize), v: f64) {
    acc.0 += v;
    acc.1 += v * v;
    acc.2 += 1;
}

fn mean_std(acc: &(f64, f64, usize)) -> (f64, f64) {
    if acc.2 == 0 {
        return (0.0, 1.0);
    }
    let mean = acc.0 / acc.2 as f64;
    let var = (acc.1 / acc.2 as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

/// Estimates all input statistics on the first [`CALIBRATION_SNAPSHOTS`]
/// snapshots and freezes them into the model: pair distances and inverse
/// distances for the short-range coordinates, and in full-range mode the
/// per-channel convolution outputs under the current multiplier.
pub fn calibrate_norm_stats(
    params: &mut ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    snapshots: &[Snapshot],
) -> Result<()> {
    if snapshots.is_empty() {
        return Err(Error::InvalidConfig("calibration needs snapshots".into()));
    }
    check_plan(params, dom, plan)?;
    let take = snapshots.len().min(CALIBRATION_SNAPSHOTS);
    let d = params.d;
    let mut s_acc = (0.0, 0.0, 0usize);
    let mut r_acc = (0.0, 0.0, 0usize);
    for snap in &snapshots[..take] {
        let lists =
            build_interaction_lists(&snap.positions, dom, params.cfg.r_cut, params.cfg.n_max_neigh)?;
        let n = snap.positions.len() / d;
        for i in 0..n {
            let xi = &snap.positions[i * d..(i + 1) * d];
            for &j in lists.neighbors(i) {
                let xj = &snap.positions[j * d..(j + 1) * d];
                let dist = dom.torus_distance(xi, xj);
                accumulate(&mut s_acc, dist);
                accumulate(&mut r_acc, 1.0 / dist);
            }
        }
    }
    let (s_mean, s_std) = mean_std(&s_acc);
    let (r_mean, r_std) = mean_std(&r_acc);
    params.norm.s_mean = s_mean;
    params.norm.s_std = s_std;
    params.norm.r_mean = r_mean;
    params.norm.r_std = r_std;
    calibrate_channel_stats(params, dom, plan, &snapshots[..take])?;
    params.norm.validate()
}

/// Re-estimates only the per-channel convolution statistics, leaving the
/// pair-coordinate statistics untouched. Warm starts use this so the
/// copied short-range nets keep seeing the inputs they were trained on.
pub fn calibrate_channel_stats(
    params: &mut ModelParams,
    dom: &Domain,
    plan: Option<&NufftPlan>,
    snapshots: &[Snapshot],
) -> Result<()> {
    if params.mode != Mode::FullRange {
        return Ok(());
    }
    if snapshots.is_empty() {
        return Err(Error::InvalidConfig("calibration needs snapshots".into()));
    }
    let plan = check_plan(params, dom, plan)?;
    let take = snapshots.len().min(CALIBRATION_SNAPSHOTS);
    let k = params.cfg.k_chnls;
    let p = plan.unwrap();
    let mp = params.multiplier.as_ref().unwrap();
    let mut accs = vec![(0.0, 0.0, 0usize); k];
    for snap in &snapshots[..take] {
        let n = snap.positions.len() / params.d;
        let u = p.lrc_forward(&snap.positions, &vec![1.0; n], mp)?;
        for i in 0..n {
            for c in 0..k {
                accumulate(&mut accs[c], u[[i, c]]);
            }
        }
    }
    for c in 0..k {
        let (mean, std) = mean_std(&accs[c]);
        params.norm.u_mean[c] = mean;
        params.norm.u_std[c] = std;
    }
    params.norm.validate()
}

/// Serialized model with enough context to rebuild its domain and plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub d: usize,
    pub length: f64,
    /// Spectral grid per axis used at train time; present iff the model
    /// is full-range, since predictions depend on the band truncation.
    pub l_fft: Option<usize>,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(dom: &Domain, l_fft: Option<usize>, seed: u64, params: ModelParams) -> Self {
        Self {
            version: Self::VERSION,
            d: dom.dim(),
            length: dom.length(),
            l_fft,
            seed,
            params,
        }
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::new(self.d, self.length)
    }

    /// JSON serialization; floats round-trip bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)
            .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
        if ck.version != Self::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        if ck.d != ck.params.d {
            return Err(Error::Checkpoint(
                "checkpoint dimension disagrees with its model".into(),
            ));
        }
        if ck.params.mode == Mode::FullRange && ck.l_fft.is_none() {
            return Err(Error::Checkpoint(
                "full-range checkpoint is missing its spectral grid".into(),
            ));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}
