//! Staged Adam training and the wall-time scaling benchmark.
//!
//! Training runs a fixed ladder of stages, each with its own batch size and
//! epoch count. The learning rate decays on a global epoch counter that runs
//! across stages, so restarting a stage ladder from scratch with the same
//! seed reproduces the exact parameter trajectory. A non-finite loss aborts
//! the run and returns the last finite model instead of an error, so callers
//! can still save a usable checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Snapshot};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::net::model::{
    calibrate_channel_stats, calibrate_norm_stats, loss_and_param_gradients, relative_l2_error,
    DescriptorConfig, Mode, ModelParams,
};
use crate::nufft::{MultiplierParams, NufftPlan};

/// Stream offset so the shuffle RNG never replays the init draws.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// One stage of the batch-size ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub batch: usize,
    pub epochs: usize,
}

fn default_lr0() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.95
}
fn default_decay_every() -> usize {
    10
}
fn default_epoch_scale() -> f64 {
    1.0
}
fn default_n_test() -> usize {
    100
}
fn default_eval_every() -> usize {
    10
}

fn default_stages() -> Vec<StageConfig> {
    [(8, 200), (16, 400), (32, 800), (64, 1600)]
        .into_iter()
        .map(|(batch, epochs)| StageConfig { batch, epochs })
        .collect()
}

/// Optimizer schedule and data split for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial Adam learning rate.
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` global epochs.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    /// Batch-size ladder; may be empty, in which case the run just
    /// initializes, calibrates, and evaluates.
    #[serde(default = "default_stages")]
    pub stages: Vec<StageConfig>,
    /// Scales every stage epoch count (each stage keeps at least one epoch).
    #[serde(default = "default_epoch_scale")]
    pub epoch_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the squared energy residual in the loss.
    #[serde(default)]
    pub w_energy: f64,
    /// Snapshots held out from the end of the dataset for evaluation.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Optional cap on the number of training snapshots (from the front).
    #[serde(default)]
    pub max_train: Option<usize>,
    /// Evaluate the held-out error every this many epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: default_lr0(),
            decay: default_decay(),
            decay_every: default_decay_every(),
            stages: default_stages(),
            epoch_scale: default_epoch_scale(),
            seed: 0,
            w_energy: 0.0,
            n_test: default_n_test(),
            max_train: None,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay.is_finite() && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if self.decay_every == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "decay_every and eval_every must be positive".into(),
            ));
        }
        if !(self.epoch_scale.is_finite() && self.epoch_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epoch_scale must be positive, got {}",
                self.epoch_scale
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.batch == 0 || stage.epochs == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i} must have positive batch and epochs"
                )));
            }
        }
        if self.n_test == 0 {
            return Err(Error::InvalidConfig("n_test must be positive".into()));
        }
        if self.max_train == Some(0) {
            return Err(Error::InvalidConfig("max_train must be positive".into()));
        }
        if !self.w_energy.is_finite() || self.w_energy < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "w_energy must be finite and non-negative, got {}",
                self.w_energy
            )));
        }
        Ok(())
    }

    fn scaled_epochs(&self, epochs: usize) -> usize {
        ((epochs as f64 * self.epoch_scale).round() as usize).max(1)
    }
}

/// Stepped learning rate: `lr0 * decay^(epoch / decay_every)` with the
/// global epoch counter, so stage boundaries do not reset the schedule.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update in place. Panics on a length mismatch;
    /// the optimizer owns its state for exactly one parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One per-epoch metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    /// Global epoch counter (also drives the learning-rate schedule).
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-snapshot loss over the epoch (parameters move between
    /// batches, so this is the usual streaming average).
    pub train_loss: f64,
    /// Held-out relative force error; populated every `eval_every` epochs
    /// and on the final epoch.
    pub test_eps_rel: Option<f64>,
    pub wall_seconds: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub metrics: Vec<MetricRow>,
    /// Relative force error on the held-out split for the returned model.
    pub final_eps_rel: f64,
    /// Set when the run aborted on a non-finite loss; `model` is then the
    /// last parameter vector that still produced a finite loss.
    pub diverged: Option<String>,
}

/// Train/test split: the last `n_test` snapshots are held out, training
/// uses the remainder optionally capped at `max_train` from the front.
pub fn split_dataset<'a>(
    snapshots: &'a [Snapshot],
    cfg: &TrainConfig,
) -> Result<(&'a [Snapshot], &'a [Snapshot])> {
    let n = snapshots.len();
    if n <= cfg.n_test {
        return Err(Error::InvalidConfig(format!(
            "dataset with {n} snapshots cannot hold out {} for testing",
            cfg.n_test
        )));
    }
    let (train, test) = snapshots.split_at(n - cfg.n_test);
    let train = match cfg.max_train {
        Some(cap) => &train[..train.len().min(cap)],
        None => train,
    };
    Ok((train, test))
}

/// Staged Adam over one dataset.
///
/// `initial = None` draws a fresh model from `cfg.seed` and calibrates its
/// input statistics on the training split; `Some` trains the given model
/// as-is (its statistics are the caller's responsibility). Deterministic
/// given the seed: shuffling, initialization, and the parallel gradient
/// reduction are all order-stable.
pub fn train_one_scale(
    dataset: &Dataset,
    mode: Mode,
    desc: &DescriptorConfig,
    plan: Option<&NufftPlan>,
    cfg: &TrainConfig,
    initial: Option<ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    desc.validate()?;
    let dom = dataset.header.domain()?;
    let (train, test) = split_dataset(&dataset.snapshots, cfg)?;

    let mut model = match initial {
        Some(m) => {
            m.validate()?;
            if m.d != dom.dim() {
                return Err(Error::ModelMismatch(format!(
                    "initial model is {}-dimensional, dataset is {}-dimensional",
                    m.d,
                    dom.dim()
                )));
            }
            if m.mode != mode {
                return Err(Error::ModelMismatch(
                    "initial model mode disagrees with the requested mode".into(),
                ));
            }
            m
        }
        None => {
            let mut m = ModelParams::init(mode, desc, dom.dim(), cfg.seed)?;
            calibrate_norm_stats(&mut m, &dom, plan, train)?;
            m
        }
    };

    let mut flat = model.flatten();
    let mut adam = Adam::new(flat.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<Snapshot> = train.to_vec();
    let total_epochs: usize = cfg
        .stages
        .iter()
        .map(|s| cfg.scaled_epochs(s.epochs))
        .sum();

    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut epoch = 0usize;
    let mut diverged = None;

    'stages: for (stage_idx, stage) in cfg.stages.iter().enumerate() {
        for _ in 0..cfg.scaled_epochs(stage.epochs) {
            let lr = lr_schedule(cfg, epoch);
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            // The final partial batch is kept.
            for chunk in order.chunks(stage.batch) {
                match loss_and_param_gradients(&model, &dom, plan, chunk, cfg.w_energy) {
                    Ok((loss, grad)) => {
                        epoch_loss += loss * chunk.len() as f64;
                        adam.step(&mut flat, &grad, lr);
                        model.assign_from_flat(&flat)?;
                    }
                    Err(Error::NonFiniteLoss(msg)) => {
                        // `model` still holds the pre-batch parameters.
                        diverged = Some(msg);
                        break 'stages;
                    }
                    Err(e) => return Err(e),
                }
            }
            let test_eps_rel = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == total_epochs {
                Some(relative_l2_error(&model, &dom, plan, test)?)
            } else {
                None
            };
            metrics.push(MetricRow {
                stage: stage_idx,
                epoch,
                lr,
                train_loss: epoch_loss / train.len() as f64,
                test_eps_rel,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            epoch += 1;
        }
    }

    let final_eps_rel = relative_l2_error(&model, &dom, plan, test)?;
    Ok(TrainOutcome {
        model,
        metrics,
        final_eps_rel,
        diverged,
    })
}

/// Outcome of the two-scale protocol.
#[derive(Debug, Clone)]
pub struct TwoScaleOutcome {
    /// Short-range model trained on the small boxes.
    pub phase_a: TrainOutcome,
    /// Full-range model warm-started from phase A and trained on the
    /// large boxes; its `final_eps_rel` is the headline number.
    pub phase_b: TrainOutcome,
}

/// Two-scale training: fit the short-range model on the small-box dataset,
/// widen it into a full-range model (the added long-range pathway starts at
/// exactly zero), calibrate only the new convolution channels on the
/// large-box training split, then continue training on the large boxes.
pub fn train_two_scale(
    small: &Dataset,
    large: &Dataset,
    desc: &DescriptorConfig,
    plan_large: &NufftPlan,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
) -> Result<TwoScaleOutcome> {
    let (ha, hb) = (&small.header, &large.header);
    if ha.d != hb.d {
        return Err(Error::ModelMismatch(format!(
            "datasets differ in dimension: {} vs {}",
            ha.d, hb.d
        )));
    }
    if ha.kind != hb.kind
        || ha.mu1 != hb.mu1
        || ha.mu2 != hb.mu2
        || ha.alpha1 != hb.alpha1
        || ha.alpha2 != hb.alpha2
    {
        return Err(Error::ModelMismatch(
            "datasets were generated from different interactions".into(),
        ));
    }

    let phase_a = train_one_scale(small, Mode::ShortRange, desc, None, cfg_a, None)?;

    let dom_large = large.header.domain()?;
    let mut warm = phase_a.model.embed(cfg_b.seed)?;
    let (train_large, _) = split_dataset(&large.snapshots, cfg_b)?;
    calibrate_channel_stats(&mut warm, &dom_large, Some(plan_large), train_large)?;

    let phase_b = train_one_scale(
        large,
        Mode::FullRange,
        desc,
        Some(plan_large),
        cfg_b,
        Some(warm),
    )?;
    Ok(TwoScaleOutcome { phase_a, phase_b })
}

/// Writes the per-epoch metrics table as CSV. Epochs without a held-out
/// evaluation leave the `test_eps_rel` field empty.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "stage,epoch,lr,train_loss,test_eps_rel,wall_seconds")?;
    for r in rows {
        let eps = r.test_eps_rel.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage, r.epoch, r.lr, r.train_loss, eps, r.wall_seconds
        )?;
    }
    out.flush()?;
    Ok(())
}

/// One row of the scaling benchmark.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub t_lrc_median: f64,
    pub t_direct_median: f64,
    /// Medians divided by the first row's medians.
    pub lrc_normalized: f64,
    pub direct_normalized: f64,
}

/// Scaling benchmark result with log-log slope fits.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln t` vs `ln N`; zero with a single row.
    pub lrc_slope: f64,
    pub direct_slope: f64,
}

/// Tabulated periodic kernel for the quadratic-cost reference route:
/// channel-0 multiplier summed as a cosine series on `[0, L/2]`, looked up
/// with linear interpolation. One-dimensional only.
pub struct DirectKernel {
    dr: f64,
    table: Vec<f64>,
}

impl DirectKernel {
    pub fn new(plan: &NufftPlan, params: &MultiplierParams, resolution: usize) -> Result<Self> {
        if plan.domain().dim() != 1 {
            return Err(Error::InvalidConfig(
                "the direct comparator is one-dimensional".into(),
            ));
        }
        if resolution < 2 {
            return Err(Error::InvalidConfig(
                "kernel table needs at least two points".into(),
            ));
        }
        let grids = plan.multiplier_grids(params)?;
        let phi = &grids.phi[0];
        let length = plan.domain().length();
        let dr = 0.5 * length / (resolution - 1) as f64;
        let kappas: Vec<f64> = (0..phi.len())
            .map(|flat| std::f64::consts::TAU * plan.mode(flat)[0] as f64 / length)
            .collect();
        let table = (0..resolution)
            .map(|t| {
                let r = t as f64 * dr;
                phi.iter()
                    .zip(&kappas)
                    .map(|(g, k)| g * (k * r).cos())
                    .sum()
            })
            .collect();
        Ok(Self { dr, table })
    }

    /// Kernel value at signed separation `r` (the kernel is even).
    pub fn eval(&self, r: f64) -> f64 {
        let x = r.abs() / self.dr;
        let t = x.floor() as usize;
        if t + 1 >= self.table.len() {
            return *self.table.last().unwrap();
        }
        let w = x - t as f64;
        self.table[t] * (1.0 - w) + self.table[t + 1] * w
    }

    /// The quadratic-cost all-to-all sum `u_i = sum_j f_j phi(x_i - x_j)`,
    /// self term included to match the fast route.
    pub fn all_pairs(&self, dom: &Domain, positions: &[f64], weights: &[f64], out: &mut [f64]) {
        for (i, slot) in out.iter_mut().enumerate() {
            let xi = positions[i];
            let mut acc = 0.0;
            for (j, &w) in weights.iter().enumerate() {
                acc += w * self.eval(dom.min_image(xi - positions[j]));
            }
            *slot = acc;
        }
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Times the fast convolution layer against the tabulated all-to-all sum
/// on uniform random clouds of increasing size, with a fixed spectral grid.
/// Both routes are checked against each other on a small cloud before any
/// timing so a broken comparator cannot produce a report.
pub fn benchmark_scaling(
    plan: &NufftPlan,
    params: &MultiplierParams,
    n_values: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if n_values.is_empty() || repeats == 0 {
        return Err(Error::InvalidConfig(
            "benchmark needs at least one size and one repeat".into(),
        ));
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "benchmark sizes must be strictly increasing".into(),
        ));
    }
    let dom = *plan.domain();
    let direct = DirectKernel::new(plan, params, 1 << 16)?;

    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n0 = 64;
        let positions: Vec<f64> = (0..n0).map(|_| rng.random::<f64>() * dom.length()).collect();
        let weights = vec![1.0; n0];
        let fast = plan.lrc_forward(&positions, &weights, params)?;
        let mut slow = vec![0.0; n0];
        direct.all_pairs(&dom, &positions, &weights, &mut slow);
        let num: f64 = (0..n0)
            .map(|i| (fast[[i, 0]] - slow[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = slow.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(num <= 1e-3 * den) {
            return Err(Error::NonFinite(format!(
                "benchmark routes disagree: |diff| = {num:.3e}, |direct| = {den:.3e}"
            )));
        }
    }

    let mut rows = Vec::with_capacity(n_values.len());
    for (idx, &n) in n_values.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64 + 1));
        let positions: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * dom.length()).collect();
        let weights = vec![1.0; n];
        let mut slow = vec![0.0; n];
        let mut t_lrc = Vec::with_capacity(repeats);
        let mut t_direct = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let u = plan.lrc_forward(&positions, &weights, params)?;
            t_lrc.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&u);
            let t0 = Instant::now();
            direct.all_pairs(&dom, &positions, &weights, &mut slow);
            t_direct.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&slow);
        }
        rows.push(BenchRow {
            n,
            t_lrc_median: median(&mut t_lrc),
            t_direct_median: median(&mut t_direct),
            lrc_normalized: 0.0,
            direct_normalized: 0.0,
        });
    }
    let (base_lrc, base_direct) = (rows[0].t_lrc_median, rows[0].t_direct_median);
    for row in &mut rows {
        row.lrc_normalized = row.t_lrc_median / base_lrc;
        row.direct_normalized = row.t_direct_median / base_direct;
    }
    let lrc_points: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.t_lrc_median)).collect();
    let direct_points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n as f64, r.t_direct_median))
        .collect();
    Ok(BenchReport {
        lrc_slope: loglog_slope(&lrc_points),
        direct_slope: loglog_slope(&direct_points),
        rows,
    })
}

/// Writes the benchmark table as CSV (plain numbers, gnuplot-friendly).
pub fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "N,t_lrc_median,t_direct_median,lrc_normalized,direct_normalized"
    )?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.n, r.t_lrc_median, r.t_direct_median, r.lrc_normalized, r.direct_normalized
        )?;
    }
    out.flush()?;
    Ok(())
}
