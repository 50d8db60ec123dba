//! Fast periodic convolution of point clouds with trainable Fourier
//! multipliers.
//!
//! Given particles `x_j` on the torus and weights `f_j`, the layer
//! evaluates, for each multiplier channel `phi_c`,
//!
//! ```text
//! u_c(x_i) = sum_j f_j phi_c(x_i - x_j),
//! phi_c(x) = sum_{k in band} phihat_c(k) e^{i kappa(k) . x},  kappa = 2 pi k / L
//! ```
//!
//! in near-linear time: spread the weighted cloud onto a fine grid with a
//! periodized Gaussian window, FFT, multiply by the (deconvolved) band
//! coefficients, inverse FFT and interpolate back at the targets. The fine
//! grid is twice the retained band per axis, which pushes window aliasing
//! to `e^{-24}` so the non-uniform transforms hold 1e-6 accuracy across
//! the whole band.
//!
//! The trainable multiplier family is
//! `phihat(k) = 4 pi beta / (|kappa|^2 + lambda^2 + 1e-6)`. Alongside the
//! forward pass the module provides directional derivatives in the
//! positions (JVP), adjoints for positions and multiplier parameters
//! (VJP), and the adjoint of the JVP itself, which second-order training
//! losses (forces) need.

pub(crate) mod ndfft;

use ndarray::Array2;
use num_complex::Complex64;

use crate::domain::Domain;
use crate::{Error, Result};
use ndfft::{signed_freq, NdFft};

/// Floor added to multiplier denominators.
pub const EPS_DEN: f64 = 1e-6;
/// Relative imaginary residue above which a "real" result is rejected.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-8;
/// Smallest supported band size per axis.
pub const MIN_L_FFT: usize = 14;

/// Gaussian stencil half-width in fine-grid cells. With the fixed
/// width/band coupling of `tau` the window truncation error at 13 cells
/// is `e^{-34.7}`, independent of the grid.
const HALF_WIDTH: usize = 13;
const STENCIL: usize = 2 * HALF_WIDTH + 1;

/// Trainable multiplier parameters, one `(beta, lambda)` pair per channel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MultiplierParams {
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl MultiplierParams {
    /// Unit initialization: `beta = lambda = 1` for every channel.
    pub fn ones(channels: usize) -> Self {
        Self {
            beta: vec![1.0; channels],
            lambda: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() || self.beta.len() != self.lambda.len() {
            return Err(Error::InvalidConfig(format!(
                "multiplier needs matching non-empty beta/lambda, got {}/{}",
                self.beta.len(),
                self.lambda.len()
            )));
        }
        if self.beta.iter().chain(&self.lambda).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("multiplier parameters".into()));
        }
        Ok(())
    }
}

/// Band-limited multiplier values and their parameter derivatives, one
/// grid per channel, flattened over the band in row-major axis order.
#[derive(Debug, Clone)]
pub struct MultiplierGrids {
    pub phi: Vec<Vec<f64>>,
    pub dbeta: Vec<Vec<f64>>,
    pub dlambda: Vec<Vec<f64>>,
}

/// Adjoints returned by [`NufftPlan::lrc_backward`].
#[derive(Debug, Clone)]
pub struct LrcGrads {
    /// d(loss)/d(positions), shape `(n, d)`.
    pub x_bar: Array2<f64>,
    pub beta_bar: Vec<f64>,
    pub lambda_bar: Vec<f64>,
}

/// Adjoints returned by [`NufftPlan::lrc_dual_backward`].
#[derive(Debug, Clone)]
pub struct LrcDualGrads {
    pub x_bar_val: Array2<f64>,
    pub x_bar_dot: Array2<f64>,
    pub beta_bar: Vec<f64>,
    pub lambda_bar: Vec<f64>,
}

/// Per-configuration spreading stencils: for every particle and axis, the
/// first fine-grid index and the 27 Gaussian window weights. Building the
/// cache once and reusing it across transforms of the same configuration
/// is the main saving of the planned API.
pub struct SpreadCache {
    n: usize,
    start: Vec<usize>,
    weights: Vec<f64>,
}

impl SpreadCache {
    pub fn n_points(&self) -> usize {
        self.n
    }
}

/// Forward values plus everything the adjoint of the directional
/// derivative needs: band transforms of the inputs and the realized
/// gradient-kernel point values.
pub struct LrcDualState {
    /// `u`, shape `(n, channels)`.
    pub u: Array2<f64>,
    /// Directional derivative of `u` along the position tangent.
    pub u_dot: Array2<f64>,
    grids: MultiplierGrids,
    f: Vec<f64>,
    x_dot: Vec<f64>,
    f_hat: Vec<Complex64>,
    fxdot_hat: Vec<Vec<Complex64>>,
    /// `p[c][a][i] = sum_j f_j (d_a phi_c)(x_i - x_j)`.
    p: Vec<Vec<Vec<f64>>>,
}

/// Reusable transform plan for one domain and band size.
pub struct NufftPlan {
    dom: Domain,
    d: usize,
    l_fft: usize,
    fine: usize,
    tau: f64,
    h: f64,
    band_size: usize,
    fine_size: usize,
    fft: NdFft,
    /// Per-axis band quantities, indexed by FFT bin `0..l_fft`.
    kappa: Vec<f64>,
    fine_idx: Vec<usize>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    /// Per-axis bin index of every flattened band mode.
    axes: Vec<[u32; 3]>,
    /// Bins without a conjugate partner (only the Nyquist bin of an even
    /// band); multipliers vanish there so real fields stay real.
    unpaired_axis: Vec<bool>,
    gauss: [f64; STENCIL],
}

impl NufftPlan {
    /// Plans transforms on `l_fft` retained modes per axis. The window
    /// width is `tau = 12 (L / (2 pi l_fft))^2`; the internal fine grid
    /// has `2 l_fft` cells per axis.
    pub fn new(dom: &Domain, l_fft: usize) -> Result<Self> {
        if l_fft < MIN_L_FFT {
            return Err(Error::GridTooSmall {
                grid: l_fft,
                min_grid: MIN_L_FFT,
            });
        }
        let d = dom.dim();
        let length = dom.length();
        let tau = 12.0 * (length / (2.0 * std::f64::consts::PI * l_fft as f64)).powi(2);
        let fine = 2 * l_fft;
        let h = length / fine as f64;
        let band_size = l_fft.pow(d as u32);
        let fine_size = fine.pow(d as u32);
        let fft = NdFft::new(&vec![fine; d]);

        let norm = 1.0 / ((4.0 * std::f64::consts::PI * tau).sqrt() * fine as f64);
        let mut kappa = Vec::with_capacity(l_fft);
        let mut fine_idx = Vec::with_capacity(l_fft);
        let mut t1 = Vec::with_capacity(l_fft);
        let mut unpaired_axis = vec![false; l_fft];
        for b in 0..l_fft {
            let k = signed_freq(b, l_fft);
            let kap = 2.0 * std::f64::consts::PI * k as f64 / length;
            kappa.push(kap);
            fine_idx.push((k.rem_euclid(fine as i64)) as usize);
            t1.push((kap * kap * tau).exp() * norm);
            if l_fft % 2 == 0 && b == l_fft / 2 {
                unpaired_axis[b] = true;
            }
        }
        let t2: Vec<f64> = t1.iter().map(|v| v * length).collect();

        let mut axes = Vec::with_capacity(band_size);
        for flat in 0..band_size {
            let mut rest = flat;
            let mut idx = [0u32; 3];
            for a in (0..d).rev() {
                idx[a] = (rest % l_fft) as u32;
                rest /= l_fft;
            }
            axes.push(idx);
        }

        let mut gauss = [0.0f64; STENCIL];
        for (o, g) in gauss.iter_mut().enumerate() {
            let dist = (o as f64 - HALF_WIDTH as f64) * h;
            *g = (-dist * dist / (4.0 * tau)).exp();
        }

        Ok(Self {
            dom: *dom,
            d,
            l_fft,
            fine,
            tau,
            h,
            band_size,
            fine_size,
            fft,
            kappa,
            fine_idx,
            t1,
            t2,
            axes,
            unpaired_axis,
            gauss,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.dom
    }

    pub fn l_fft(&self) -> usize {
        self.l_fft
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn band_size(&self) -> usize {
        self.band_size
    }

    /// Signed mode numbers of a flattened band index, one per axis.
    pub fn mode(&self, flat: usize) -> [i64; 3] {
        let idx = self.axes[flat];
        let mut out = [0i64; 3];
        for a in 0..self.d {
            out[a] = signed_freq(idx[a] as usize, self.l_fft);
        }
        out
    }

    /// `|kappa|^2` of a flattened band index.
    pub fn kappa_sq(&self, flat: usize) -> f64 {
        let idx = self.axes[flat];
        (0..self.d)
            .map(|a| {
                let k = self.kappa[idx[a] as usize];
                k * k
            })
            .sum()
    }

    fn kappa_axis(&self, flat: usize, axis: usize) -> f64 {
        self.kappa[self.axes[flat][axis] as usize]
    }

    fn is_unpaired(&self, flat: usize) -> bool {
        let idx = self.axes[flat];
        (0..self.d).any(|a| self.unpaired_axis[idx[a] as usize])
    }

    fn volume(&self) -> f64 {
        self.dom.length().powi(self.d as i32)
    }

    /// Precomputes spreading stencils for a configuration. Positions are
    /// flattened `n * d`; any representative of the periodic class works.
    pub fn spread_cache(&self, positions: &[f64]) -> Result<SpreadCache> {
        if positions.len() % self.d != 0 {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: positions.len(),
                context: "positions length must be a multiple of the dimension".into(),
            });
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("positions".into()));
        }
        let n = positions.len() / self.d;
        let mut start = vec![0usize; n * self.d];
        let mut weights = vec![0.0f64; n * self.d * STENCIL];
        let inv_4tau = 1.0 / (4.0 * self.tau);
        let half_ratio = self.h / (2.0 * self.tau);
        for (ja, &xr) in positions.iter().enumerate() {
            let x = self.dom.wrap(xr);
            let c = (x / self.h).round();
            let delta0 = x - c * self.h;
            let c = (c as i64).rem_euclid(self.fine as i64) as usize;
            start[ja] = (c + self.fine - HALF_WIDTH) % self.fine;
            let base = (-delta0 * delta0 * inv_4tau).exp();
            let ratio = (delta0 * half_ratio).exp();
            let mut p = (-(HALF_WIDTH as f64) * delta0 * half_ratio).exp();
            let w = &mut weights[ja * STENCIL..(ja + 1) * STENCIL];
            for (o, wo) in w.iter_mut().enumerate() {
                *wo = base * p * self.gauss[o];
                p *= ratio;
            }
        }
        Ok(SpreadCache { n, start, weights })
    }

    fn check_weights(&self, cache: &SpreadCache, weights: &[f64]) -> Result<()> {
        if weights.len() != cache.n {
            return Err(Error::DimensionMismatch {
                expected: cache.n,
                got: weights.len(),
                context: "one weight per point".into(),
            });
        }
        Ok(())
    }

    fn spread(&self, cache: &SpreadCache, weights: &[f64], buf: &mut [Complex64]) {
        let fine = self.fine;
        match self.d {
            1 => {
                for (j, &wj) in weights.iter().enumerate() {
                    let s = cache.start[j];
                    let w = &cache.weights[j * STENCIL..(j + 1) * STENCIL];
                    for (o, &wo) in w.iter().enumerate() {
                        let mut idx = s + o;
                        if idx >= fine {
                            idx -= fine;
                        }
                        buf[idx].re += wj * wo;
                    }
                }
            }
            2 => {
                for (j, &wj) in weights.iter().enumerate() {
                    let s0 = cache.start[j * 2];
                    let s1 = cache.start[j * 2 + 1];
                    let w0 = &cache.weights[j * 2 * STENCIL..(j * 2 + 1) * STENCIL];
                    let w1 = &cache.weights[(j * 2 + 1) * STENCIL..(j * 2 + 2) * STENCIL];
                    for (o0, &a0) in w0.iter().enumerate() {
                        let mut i0 = s0 + o0;
                        if i0 >= fine {
                            i0 -= fine;
                        }
                        let row = i0 * fine;
                        let v0 = wj * a0;
                        for (o1, &a1) in w1.iter().enumerate() {
                            let mut i1 = s1 + o1;
                            if i1 >= fine {
                                i1 -= fine;
                            }
                            buf[row + i1].re += v0 * a1;
                        }
                    }
                }
            }
            _ => {
                for (j, &wj) in weights.iter().enumerate() {
                    let s = &cache.start[j * 3..j * 3 + 3];
                    let wbase = j * 3 * STENCIL;
                    let w0 = &cache.weights[wbase..wbase + STENCIL];
                    let w1 = &cache.weights[wbase + STENCIL..wbase + 2 * STENCIL];
                    let w2 = &cache.weights[wbase + 2 * STENCIL..wbase + 3 * STENCIL];
                    for (o0, &a0) in w0.iter().enumerate() {
                        let mut i0 = s[0] + o0;
                        if i0 >= fine {
                            i0 -= fine;
                        }
                        let v0 = wj * a0;
                        for (o1, &a1) in w1.iter().enumerate() {
                            let mut i1 = s[1] + o1;
                            if i1 >= fine {
                                i1 -= fine;
                            }
                            let row = (i0 * fine + i1) * fine;
                            let v01 = v0 * a1;
                            for (o2, &a2) in w2.iter().enumerate() {
                                let mut i2 = s[2] + o2;
                                if i2 >= fine {
                                    i2 -= fine;
                                }
                                buf[row + i2].re += v01 * a2;
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather(&self, cache: &SpreadCache, buf: &[Complex64]) -> Vec<Complex64> {
        let fine = self.fine;
        let mut out = vec![Complex64::default(); cache.n];
        match self.d {
            1 => {
                for (j, oj) in out.iter_mut().enumerate() {
                    let s = cache.start[j];
                    let w = &cache.weights[j * STENCIL..(j + 1) * STENCIL];
                    let mut acc = Complex64::default();
                    for (o, &wo) in w.iter().enumerate() {
                        let mut idx = s + o;
                        if idx >= fine {
                            idx -= fine;
                        }
                        acc += buf[idx] * wo;
                    }
                    *oj = acc;
                }
            }
            2 => {
                for (j, oj) in out.iter_mut().enumerate() {
                    let s0 = cache.start[j * 2];
                    let s1 = cache.start[j * 2 + 1];
                    let w0 = &cache.weights[j * 2 * STENCIL..(j * 2 + 1) * STENCIL];
                    let w1 = &cache.weights[(j * 2 + 1) * STENCIL..(j * 2 + 2) * STENCIL];
                    let mut acc = Complex64::default();
                    for (o0, &a0) in w0.iter().enumerate() {
                        let mut i0 = s0 + o0;
                        if i0 >= fine {
                            i0 -= fine;
                        }
                        let row = i0 * fine;
                        let mut inner = Complex64::default();
                        for (o1, &a1) in w1.iter().enumerate() {
                            let mut i1 = s1 + o1;
                            if i1 >= fine {
                                i1 -= fine;
                            }
                            inner += buf[row + i1] * a1;
                        }
                        acc += inner * a0;
                    }
                    *oj = acc;
                }
            }
            _ => {
                for (j, oj) in out.iter_mut().enumerate() {
                    let s = &cache.start[j * 3..j * 3 + 3];
                    let wbase = j * 3 * STENCIL;
                    let w0 = &cache.weights[wbase..wbase + STENCIL];
                    let w1 = &cache.weights[wbase + STENCIL..wbase + 2 * STENCIL];
                    let w2 = &cache.weights[wbase + 2 * STENCIL..wbase + 3 * STENCIL];
                    let mut acc = Complex64::default();
                    for (o0, &a0) in w0.iter().enumerate() {
                        let mut i0 = s[0] + o0;
                        if i0 >= fine {
                            i0 -= fine;
                        }
                        let mut acc1 = Complex64::default();
                        for (o1, &a1) in w1.iter().enumerate() {
                            let mut i1 = s[1] + o1;
                            if i1 >= fine {
                                i1 -= fine;
                            }
                            let row = (i0 * fine + i1) * fine;
                            let mut acc2 = Complex64::default();
                            for (o2, &a2) in w2.iter().enumerate() {
                                let mut i2 = s[2] + o2;
                                if i2 >= fine {
                                    i2 -= fine;
                                }
                                acc2 += buf[row + i2] * a2;
                            }
                            acc1 += acc2 * a1;
                        }
                        acc += acc1 * a0;
                    }
                    *oj = acc;
                }
            }
        }
        out
    }

    /// Type-1 transform: band coefficients
    /// `F(k) = (1/L^d) sum_j w_j e^{-i kappa(k) . x_j}`, flattened in
    /// row-major axis order with per-axis FFT bin ordering.
    pub fn type1(&self, positions: &[f64], weights: &[f64]) -> Result<Vec<Complex64>> {
        let cache = self.spread_cache(positions)?;
        self.type1_cached(&cache, weights)
    }

    /// [`Self::type1`] against a prebuilt stencil cache.
    pub fn type1_cached(&self, cache: &SpreadCache, weights: &[f64]) -> Result<Vec<Complex64>> {
        self.check_weights(cache, weights)?;
        let mut buf = vec![Complex64::default(); self.fine_size];
        self.spread(cache, weights, &mut buf);
        self.fft.forward(&mut buf);
        let mut out = Vec::with_capacity(self.band_size);
        for flat in 0..self.band_size {
            let idx = self.axes[flat];
            let mut fine_flat = 0usize;
            let mut factor = 1.0f64;
            for a in 0..self.d {
                let b = idx[a] as usize;
                fine_flat = fine_flat * self.fine + self.fine_idx[b];
                factor *= self.t1[b];
            }
            out.push(buf[fine_flat] * factor);
        }
        Ok(out)
    }

    /// Type-2 transform: point evaluations
    /// `u(x_i) = sum_k coeffs(k) e^{i kappa(k) . x_i}` of a band-limited
    /// field.
    pub fn type2(&self, positions: &[f64], coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
        let cache = self.spread_cache(positions)?;
        self.type2_cached(&cache, coeffs)
    }

    /// [`Self::type2`] against a prebuilt stencil cache.
    pub fn type2_cached(&self, cache: &SpreadCache, coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
        if coeffs.len() != self.band_size {
            return Err(Error::DimensionMismatch {
                expected: self.band_size,
                got: coeffs.len(),
                context: "one coefficient per band mode".into(),
            });
        }
        let mut buf = vec![Complex64::default(); self.fine_size];
        for flat in 0..self.band_size {
            let idx = self.axes[flat];
            let mut fine_flat = 0usize;
            let mut factor = 1.0f64;
            for a in 0..self.d {
                let b = idx[a] as usize;
                fine_flat = fine_flat * self.fine + self.fine_idx[b];
                factor *= self.t2[b];
            }
            buf[fine_flat] = coeffs[flat] * factor;
        }
        self.fft.inverse(&mut buf);
        Ok(self.gather(cache, &buf))
    }

    /// Band values of the multiplier and of its parameter derivatives for
    /// every channel. Unpaired Nyquist bins (even bands only) are zeroed.
    pub fn multiplier_grids(&self, params: &MultiplierParams) -> Result<MultiplierGrids> {
        params.validate()?;
        let k = params.channels();
        let four_pi = 4.0 * std::f64::consts::PI;
        let mut phi = Vec::with_capacity(k);
        let mut dbeta = Vec::with_capacity(k);
        let mut dlambda = Vec::with_capacity(k);
        for c in 0..k {
            let beta = params.beta[c];
            let lambda = params.lambda[c];
            let mut phi_c = Vec::with_capacity(self.band_size);
            let mut db_c = Vec::with_capacity(self.band_size);
            let mut dl_c = Vec::with_capacity(self.band_size);
            for flat in 0..self.band_size {
                if self.is_unpaired(flat) {
                    phi_c.push(0.0);
                    db_c.push(0.0);
                    dl_c.push(0.0);
                    continue;
                }
                let den = self.kappa_sq(flat) + lambda * lambda + EPS_DEN;
                let db = four_pi / den;
                let p = beta * db;
                phi_c.push(p);
                db_c.push(db);
                dl_c.push(-2.0 * lambda * p / den);
            }
            phi.push(phi_c);
            dbeta.push(db_c);
            dlambda.push(dl_c);
        }
        Ok(MultiplierGrids {
            phi,
            dbeta,
            dlambda,
        })
    }

    /// `sum_j w_j m(x_i - x_j)` for the kernel with band coefficients
    /// `g`, given the type-1 transform of the weights.
    fn apply_real(&self, cache: &SpreadCache, f_hat: &[Complex64], g: &[f64]) -> Result<Vec<Complex64>> {
        let vol = self.volume();
        let coeffs: Vec<Complex64> = f_hat
            .iter()
            .zip(g)
            .map(|(f, &gv)| f * (gv * vol))
            .collect();
        self.type2_cached(cache, &coeffs)
    }

    /// As [`Self::apply_real`] for complex band coefficients.
    fn apply_cplx(
        &self,
        cache: &SpreadCache,
        f_hat: &[Complex64],
        g: &[Complex64],
    ) -> Result<Vec<Complex64>> {
        let vol = self.volume();
        let coeffs: Vec<Complex64> = f_hat.iter().zip(g).map(|(f, &gv)| f * gv * vol).collect();
        self.type2_cached(cache, &coeffs)
    }

    /// Band coefficients of `d_a phi`: `i kappa_a(k) phi(k)`.
    fn grad_grid(&self, phi: &[f64], axis: usize) -> Vec<Complex64> {
        (0..self.band_size)
            .map(|flat| Complex64::new(0.0, self.kappa_axis(flat, axis)) * phi[flat])
            .collect()
    }

    /// Band coefficients of `d_a d_b phi`: `-kappa_a kappa_b phi`.
    fn hess_grid(&self, phi: &[f64], a: usize, b: usize) -> Vec<f64> {
        (0..self.band_size)
            .map(|flat| -self.kappa_axis(flat, a) * self.kappa_axis(flat, b) * phi[flat])
            .collect()
    }

    fn realize(&self, points: Vec<Complex64>, what: &str) -> Result<Vec<f64>> {
        let re_norm: f64 = points.iter().map(|c| c.re * c.re).sum::<f64>().sqrt();
        let im_norm: f64 = points.iter().map(|c| c.im * c.im).sum::<f64>().sqrt();
        let residue = im_norm / re_norm.max(1e-300);
        if residue > IMAG_RESIDUE_LIMIT {
            return Err(Error::ImagResidueTooLarge {
                residue,
                limit: IMAG_RESIDUE_LIMIT,
            });
        }
        let _ = what;
        Ok(points.into_iter().map(|c| c.re).collect())
    }

    /// Convolution of the weighted cloud with every multiplier channel:
    /// `u[(i, c)] = sum_j f_j phi_c(x_i - x_j)` (the `j = i` term included).
    pub fn lrc_forward(
        &self,
        positions: &[f64],
        weights: &[f64],
        params: &MultiplierParams,
    ) -> Result<Array2<f64>> {
        let cache = self.spread_cache(positions)?;
        self.lrc_forward_cached(&cache, weights, params)
    }

    /// [`Self::lrc_forward`] against a prebuilt stencil cache.
    pub fn lrc_forward_cached(
        &self,
        cache: &SpreadCache,
        weights: &[f64],
        params: &MultiplierParams,
    ) -> Result<Array2<f64>> {
        let grids = self.multiplier_grids(params)?;
        let f_hat = self.type1_cached(cache, weights)?;
        self.forward_from(cache, &f_hat, &grids)
    }

    fn forward_from(
        &self,
        cache: &SpreadCache,
        f_hat: &[Complex64],
        grids: &MultiplierGrids,
    ) -> Result<Array2<f64>> {
        let n = cache.n;
        let k = grids.phi.len();
        let mut u = Array2::zeros((n, k));
        for (c, phi_c) in grids.phi.iter().enumerate() {
            let vals = self.realize(self.apply_real(cache, f_hat, phi_c)?, "forward")?;
            for (i, v) in vals.into_iter().enumerate() {
                u[[i, c]] = v;
            }
        }
        Ok(u)
    }

    /// Forward values together with the directional derivative along a
    /// position tangent `x_dot` (flattened `n * d`):
    /// `u_dot[(i, c)] = d/dt u_c(x + t x_dot)|_{t=0}`.
    pub fn lrc_jvp(
        &self,
        positions: &[f64],
        weights: &[f64],
        params: &MultiplierParams,
        x_dot: &[f64],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let state = self.lrc_dual_forward(positions, weights, params, x_dot)?;
        Ok((state.u, state.u_dot))
    }

    /// Adjoint of [`Self::lrc_forward`]: given `u_bar`, returns the
    /// gradient of `sum_{i,c} u_bar[(i,c)] u[(i,c)]` with respect to the
    /// positions and the multiplier parameters.
    pub fn lrc_backward(
        &self,
        positions: &[f64],
        weights: &[f64],
        params: &MultiplierParams,
        u_bar: &Array2<f64>,
    ) -> Result<LrcGrads> {
        let cache = self.spread_cache(positions)?;
        self.lrc_backward_cached(&cache, weights, params, u_bar)
    }

    /// [`Self::lrc_backward`] against a prebuilt stencil cache.
    pub fn lrc_backward_cached(
        &self,
        cache: &SpreadCache,
        weights: &[f64],
        params: &MultiplierParams,
        u_bar: &Array2<f64>,
    ) -> Result<LrcGrads> {
        let grids = self.multiplier_grids(params)?;
        let n = cache.n;
        let k = grids.phi.len();
        if u_bar.dim() != (n, k) {
            return Err(Error::DimensionMismatch {
                expected: n * k,
                got: u_bar.len(),
                context: "cotangent shape must be (points, channels)".into(),
            });
        }
        self.check_weights(cache, weights)?;
        let f_hat = self.type1_cached(cache, weights)?;
        let vol2 = self.volume() * self.volume();

        let mut x_bar = Array2::zeros((n, self.d));
        let mut beta_bar = vec![0.0; k];
        let mut lambda_bar = vec![0.0; k];
        let mut ub_c = vec![0.0f64; n];
        for c in 0..k {
            for i in 0..n {
                ub_c[i] = u_bar[[i, c]];
            }
            let ub_hat = self.type1_cached(cache, &ub_c)?;
            for flat in 0..self.band_size {
                let cross = (f_hat[flat] * ub_hat[flat].conj()).re * vol2;
                beta_bar[c] += grids.dbeta[c][flat] * cross;
                lambda_bar[c] += grids.dlambda[c][flat] * cross;
            }
            for a in 0..self.d {
                let g = self.grad_grid(&grids.phi[c], a);
                let p = self.realize(self.apply_cplx(cache, &f_hat, &g)?, "backward p")?;
                let q = self.realize(self.apply_cplx(cache, &ub_hat, &g)?, "backward q")?;
                for i in 0..n {
                    x_bar[[i, a]] += ub_c[i] * p[i] + weights[i] * q[i];
                }
            }
        }
        Ok(LrcGrads {
            x_bar,
            beta_bar,
            lambda_bar,
        })
    }

    /// Forward and directional derivative with all intermediates kept for
    /// [`Self::lrc_dual_backward`].
    pub fn lrc_dual_forward(
        &self,
        positions: &[f64],
        weights: &[f64],
        params: &MultiplierParams,
        x_dot: &[f64],
    ) -> Result<LrcDualState> {
        let cache = self.spread_cache(positions)?;
        self.lrc_dual_forward_cached(&cache, weights, params, x_dot)
    }

    /// [`Self::lrc_dual_forward`] against a prebuilt stencil cache.
    pub fn lrc_dual_forward_cached(
        &self,
        cache: &SpreadCache,
        weights: &[f64],
        params: &MultiplierParams,
        x_dot: &[f64],
    ) -> Result<LrcDualState> {
        self.check_weights(cache, weights)?;
        let n = cache.n;
        if x_dot.len() != n * self.d {
            return Err(Error::DimensionMismatch {
                expected: n * self.d,
                got: x_dot.len(),
                context: "one tangent per coordinate".into(),
            });
        }
        let grids = self.multiplier_grids(params)?;
        let k = grids.phi.len();
        let f_hat = self.type1_cached(cache, weights)?;
        let u = self.forward_from(cache, &f_hat, &grids)?;

        let mut fxdot_hat = Vec::with_capacity(self.d);
        let mut fx = vec![0.0f64; n];
        for a in 0..self.d {
            for i in 0..n {
                fx[i] = weights[i] * x_dot[i * self.d + a];
            }
            fxdot_hat.push(self.type1_cached(cache, &fx)?);
        }

        let mut u_dot = Array2::zeros((n, k));
        let mut p_all = Vec::with_capacity(k);
        for c in 0..k {
            let mut p_c = Vec::with_capacity(self.d);
            let mut dot_c = vec![Complex64::default(); n];
            for a in 0..self.d {
                let g = self.grad_grid(&grids.phi[c], a);
                let p = self.apply_cplx(cache, &f_hat, &g)?;
                let w = self.apply_cplx(cache, &fxdot_hat[a], &g)?;
                for i in 0..n {
                    dot_c[i] += p[i] * x_dot[i * self.d + a] - w[i];
                }
                p_c.push(self.realize(p, "jvp p")?);
            }
            let vals = self.realize(dot_c, "jvp")?;
            for (i, v) in vals.into_iter().enumerate() {
                u_dot[[i, c]] = v;
            }
            p_all.push(p_c);
        }
        Ok(LrcDualState {
            u,
            u_dot,
            grids,
            f: weights.to_vec(),
            x_dot: x_dot.to_vec(),
            f_hat,
            fxdot_hat,
            p: p_all,
        })
    }

    /// Adjoint of the dual forward pass: gradient of
    /// `sum u_bar_val . u + sum u_bar_dot . u_dot` with respect to the
    /// positions, the tangent and the multiplier parameters.
    pub fn lrc_dual_backward(
        &self,
        cache: &SpreadCache,
        state: &LrcDualState,
        u_bar_val: &Array2<f64>,
        u_bar_dot: &Array2<f64>,
    ) -> Result<LrcDualGrads> {
        let n = cache.n;
        let d = self.d;
        let k = state.grids.phi.len();
        for (name, arr) in [("value", u_bar_val), ("tangent", u_bar_dot)] {
            if arr.dim() != (n, k) {
                return Err(Error::DimensionMismatch {
                    expected: n * k,
                    got: arr.len(),
                    context: format!("{name} cotangent shape must be (points, channels)"),
                });
            }
        }
        let vol2 = self.volume() * self.volume();
        let mut x_bar_val = Array2::zeros((n, d));
        let mut x_bar_dot = Array2::zeros((n, d));
        let mut beta_bar = vec![0.0; k];
        let mut lambda_bar = vec![0.0; k];

        let mut ubv = vec![0.0f64; n];
        let mut ubd = vec![0.0f64; n];
        let mut ubd_x = vec![0.0f64; n];
        for c in 0..k {
            for i in 0..n {
                ubv[i] = u_bar_val[[i, c]];
                ubd[i] = u_bar_dot[[i, c]];
            }
            let ubv_hat = self.type1_cached(cache, &ubv)?;
            let ubd_hat = self.type1_cached(cache, &ubd)?;

            // First-order pieces: value cotangent through u, tangent
            // cotangent through the linear-in-x_dot part of u_dot.
            for b in 0..d {
                let g = self.grad_grid(&state.grids.phi[c], b);
                let q_val = self.realize(self.apply_cplx(cache, &ubv_hat, &g)?, "dual q_val")?;
                let q_dot = self.realize(self.apply_cplx(cache, &ubd_hat, &g)?, "dual q_dot")?;
                let p_cb = &state.p[c][b];
                for i in 0..n {
                    x_bar_val[[i, b]] += ubv[i] * p_cb[i] + state.f[i] * q_val[i];
                    x_bar_dot[[i, b]] += ubd[i] * p_cb[i] + state.f[i] * q_dot[i];
                }
            }

            // Parameter adjoint through u.
            for flat in 0..self.band_size {
                let cross = (state.f_hat[flat] * ubv_hat[flat].conj()).re * vol2;
                beta_bar[c] += state.grids.dbeta[c][flat] * cross;
                lambda_bar[c] += state.grids.dlambda[c][flat] * cross;
            }

            // Second-order pieces: position adjoint and parameter adjoint
            // through u_dot.
            for a in 0..d {
                for i in 0..n {
                    ubd_x[i] = ubd[i] * state.x_dot[i * d + a];
                }
                let ubdx_hat = self.type1_cached(cache, &ubd_x)?;

                // d/d(beta, lambda) of sum_i ubd_i u_dot_i restricted to
                // direction a: i kappa_a dphi (F_f conj(F_{ubd xdot_a})
                // - F_{f xdot_a} conj(F_ubd)).
                for flat in 0..self.band_size {
                    let ka = self.kappa_axis(flat, a);
                    let cross = (state.f_hat[flat] * ubdx_hat[flat].conj()
                        - state.fxdot_hat[a][flat] * ubd_hat[flat].conj())
                        * Complex64::new(0.0, ka);
                    let cross = cross.re * vol2;
                    beta_bar[c] += state.grids.dbeta[c][flat] * cross;
                    lambda_bar[c] += state.grids.dlambda[c][flat] * cross;
                }

                for b in 0..d {
                    let hess = self.hess_grid(&state.grids.phi[c], a, b);
                    let af = self.realize(self.apply_real(cache, &state.f_hat, &hess)?, "dual af")?;
                    let afx =
                        self.realize(self.apply_real(cache, &state.fxdot_hat[a], &hess)?, "dual afx")?;
                    let aux =
                        self.realize(self.apply_real(cache, &ubdx_hat, &hess)?, "dual aux")?;
                    let aud = self.realize(self.apply_real(cache, &ubd_hat, &hess)?, "dual aud")?;
                    for i in 0..n {
                        let xa = state.x_dot[i * d + a];
                        x_bar_val[[i, b]] += ubd[i] * (xa * af[i] - afx[i])
                            - state.f[i] * (aux[i] - xa * aud[i]);
                    }
                }
            }
        }
        Ok(LrcDualGrads {
            x_bar_val,
            x_bar_dot,
            beta_bar,
            lambda_bar,
        })
    }
}
