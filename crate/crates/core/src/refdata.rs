//! Reference potentials and dataset generation.
//!
//! Two pair interactions are supported on the torus, each optionally mixed
//! from two components `alpha_1 psi_{mu_1} + alpha_2 psi_{mu_2}`:
//!
//! - exponential: `psi(r) = exp(-mu r)` at the minimum-image distance,
//!   with closed-form forces;
//! - screened-Coulomb: the periodic solution of `(Laplacian - mu^2) G = -delta`,
//!   evaluated as a truncated Fourier series with coefficients
//!   `chi_eps(k) / (|kappa|^2 + mu^2)`, `kappa = 2 pi k / L`, where
//!   `chi_eps(k) = exp(-eps |kappa|^2)` damps the tail. Forces come from the
//!   term-wise derivative of the same series, so they are exact gradients of
//!   the evaluated energy.
//!
//! The Gaussian damping biases the kernel by a factor `exp(mu^2 eps)`
//! relative to the sharp periodic solution, so grid validation bounds both
//! the truncated tail and this bias; [`SpectralTable::auto_grid`] picks the
//! smallest grid passing both.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dataset::{Dataset, DatasetHeader, KernelKind, Snapshot};
use crate::domain::{sample_configuration, snapshot_rng, Domain};
use crate::nufft::ndfft::{signed_freq, NdFft};
use crate::{Error, Result};

/// Largest admissible relative Fourier-tail coefficient.
pub const SPECTRAL_TAIL_LIMIT: f64 = 1e-6;
/// Largest admissible smoothing bias `exp(mu^2 eps) - 1`.
pub const SMOOTH_BIAS_LIMIT: f64 = 6e-3;
/// Relative tolerance of the per-snapshot force zero-sum self-check.
pub const FORCE_BALANCE_TOL: f64 = 1e-10;

const MIN_SPECTRAL_GRID: usize = 32;
const MAX_SPECTRAL_GRID: usize = 16384;

/// Two-component interaction specification. `alpha_1 + alpha_2 = 1` with
/// `alpha_1 >= alpha_2 >= 0`; when both components are active the first is
/// the shorter-ranged one (`mu_1 > mu_2`). With `alpha_2 = 0` the second
/// component is absent and `mu_2` is ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub mu1: f64,
    pub mu2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// A single kernel component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Exponential,
    Screened,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
        ] {
            if !v.is_finite() {
                return bad(format!("kernel parameter {name} is not finite"));
            }
        }
        if self.mu1 <= 0.0 {
            return bad(format!("mu1 must be positive, got {}", self.mu1));
        }
        if self.alpha2 < 0.0 || self.alpha1 < self.alpha2 {
            return bad(format!(
                "weights must satisfy alpha1 >= alpha2 >= 0, got ({}, {})",
                self.alpha1, self.alpha2
            ));
        }
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-12 {
            return bad(format!(
                "weights must sum to 1, got {} + {}",
                self.alpha1, self.alpha2
            ));
        }
        if self.alpha2 > 0.0 {
            if self.mu2 <= 0.0 {
                return bad(format!("mu2 must be positive, got {}", self.mu2));
            }
            if self.mu1 <= self.mu2 {
                return bad(format!(
                    "two-component kernels need mu1 > mu2, got ({}, {})",
                    self.mu1, self.mu2
                ));
            }
        }
        Ok(())
    }

    /// Active components as `(kind, mu, alpha)` triples.
    pub fn components(&self) -> Vec<(ComponentKind, f64, f64)> {
        let (k1, k2) = match self.kind {
            KernelKind::Exponential => (ComponentKind::Exponential, ComponentKind::Exponential),
            KernelKind::ScreenedCoulomb => (ComponentKind::Screened, ComponentKind::Screened),
            KernelKind::Mixed => (ComponentKind::Exponential, ComponentKind::Screened),
        };
        let mut out = vec![(k1, self.mu1, self.alpha1)];
        if self.alpha2 > 0.0 {
            out.push((k2, self.mu2, self.alpha2));
        }
        out
    }
}

/// Truncated Fourier representation of the periodic screened-Coulomb
/// kernel on a cubic `grid^d` mode lattice. Coefficients are evaluated on
/// the fly from per-axis factors, so memory stays `O(d * grid)` even for
/// fine 3D lattices.
#[derive(Debug, Clone)]
pub struct SpectralTable {
    dom: Domain,
    mu: f64,
    grid: usize,
    eps_smooth: f64,
    /// Per-axis angular frequency of each FFT bin, `2 pi k / L`.
    kappa: Vec<f64>,
    /// Per-axis damping `exp(-eps kappa^2)`; zero at the unpaired Nyquist
    /// bin so every retained mode has its conjugate partner and the kernel
    /// is exactly real and even.
    chi: Vec<f64>,
}

impl SpectralTable {
    /// Builds a table for screening parameter `mu` on `grid` modes per
    /// axis. `eps_smooth` defaults to `(L / grid)^2`.
    pub fn new(dom: &Domain, mu: f64, grid: usize, eps_smooth: Option<f64>) -> Result<Self> {
        if !mu.is_finite() || mu <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "screening parameter must be positive, got {mu}"
            )));
        }
        if grid < MIN_SPECTRAL_GRID || grid % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "spectral grid must be even and at least {MIN_SPECTRAL_GRID}, got {grid}"
            )));
        }
        let length = dom.length();
        let eps = eps_smooth.unwrap_or_else(|| (length / grid as f64).powi(2));
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "smoothing parameter must be positive, got {eps}"
            )));
        }

        // Highest retained frequency per axis (the Nyquist bin is dropped).
        let kappa_edge = 2.0 * std::f64::consts::PI * (grid as f64 / 2.0 - 1.0) / length;
        let tail = (-eps * kappa_edge * kappa_edge).exp() * mu * mu
            / (kappa_edge * kappa_edge + mu * mu);
        let bias = (mu * mu * eps).exp_m1();
        if tail > SPECTRAL_TAIL_LIMIT || bias > SMOOTH_BIAS_LIMIT {
            return Err(Error::GridTooCoarse {
                grid,
                mu,
                tail: tail.max(bias),
                limit: if tail > SPECTRAL_TAIL_LIMIT {
                    SPECTRAL_TAIL_LIMIT
                } else {
                    SMOOTH_BIAS_LIMIT
                },
            });
        }

        let kappa: Vec<f64> = (0..grid)
            .map(|i| 2.0 * std::f64::consts::PI * signed_freq(i, grid) as f64 / length)
            .collect();
        let chi: Vec<f64> = kappa
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if i == grid / 2 {
                    0.0
                } else {
                    (-eps * k * k).exp()
                }
            })
            .collect();
        Ok(Self {
            dom: *dom,
            mu,
            grid,
            eps_smooth: eps,
            kappa,
            chi,
        })
    }

    /// Smallest even grid (from an FFT-friendly ladder) passing both the
    /// tail and the smoothing-bias bound with the default `eps_smooth`.
    pub fn auto_grid(dom: &Domain, mu: f64) -> Result<usize> {
        let mut m = MIN_SPECTRAL_GRID;
        let mut last_err = None;
        while m <= MAX_SPECTRAL_GRID {
            match Self::new(dom, mu, m, None) {
                Ok(_) => return Ok(m),
                Err(e) => last_err = Some(e),
            }
            // 2^a * 3^b ladder: 32, 48, 64, 96, ...
            m = if m % 3 == 0 { m / 3 * 4 } else { m / 2 * 3 };
        }
        Err(last_err.expect("at least one candidate grid was tried"))
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn eps_smooth(&self) -> f64 {
        self.eps_smooth
    }

    /// Zero-mode coefficient `1 / mu^2`.
    pub fn coeff0(&self) -> f64 {
        1.0 / (self.mu * self.mu)
    }

    /// Kernel value and gradient with respect to the displacement. The
    /// series is periodic, so `delta` may be any representative of the
    /// displacement class.
    pub fn psi_and_grad(&self, delta: &[f64]) -> (f64, [f64; 3]) {
        debug_assert_eq!(delta.len(), self.dom.dim());
        match self.dom.dim() {
            1 => self.eval_1d(delta[0]),
            2 => self.eval_nd::<2>(delta),
            3 => self.eval_nd::<3>(delta),
            _ => unreachable!(),
        }
    }

    /// 1D path: symmetric cosine series via a rotation recurrence.
    fn eval_1d(&self, delta: f64) -> (f64, [f64; 3]) {
        let m = self.grid;
        let mu2 = self.mu * self.mu;
        let theta = 2.0 * std::f64::consts::PI * delta / self.dom.length();
        let (sin_t, cos_t) = theta.sin_cos();
        let mut cos_k = 1.0f64;
        let mut sin_k = 0.0f64;
        let mut psi = 1.0 / mu2; // k = 0 term
        let mut grad = 0.0f64;
        for k in 1..m / 2 {
            let (c, s) = (cos_k, sin_k);
            cos_k = c * cos_t - s * sin_t;
            sin_k = s * cos_t + c * sin_t;
            let kappa = self.kappa[k];
            let coeff = self.chi[k] / (kappa * kappa + mu2);
            psi += 2.0 * coeff * cos_k;
            grad -= 2.0 * coeff * kappa * sin_k;
        }
        let inv_vol = 1.0 / self.dom.length();
        (psi * inv_vol, [grad * inv_vol, 0.0, 0.0])
    }

    fn eval_nd<const D: usize>(&self, delta: &[f64]) -> (f64, [f64; 3]) {
        let m = self.grid;
        let mu2 = self.mu * self.mu;
        let mut phases: Vec<Vec<Complex64>> = Vec::with_capacity(D);
        for &dc in delta.iter().take(D) {
            phases.push(self.kappa.iter().map(|&k| Complex64::cis(k * dc)).collect());
        }
        let mut psi = 0.0;
        let mut grad = [0.0f64; 3];
        if D == 2 {
            for i0 in 0..m {
                let p0 = phases[0][i0];
                let chi0 = self.chi[i0];
                if chi0 == 0.0 {
                    continue;
                }
                let k0 = self.kappa[i0];
                for i1 in 0..m {
                    let c = chi0 * self.chi[i1];
                    if c == 0.0 {
                        continue;
                    }
                    let k1 = self.kappa[i1];
                    let coeff = c / (k0 * k0 + k1 * k1 + mu2);
                    let p = p0 * phases[1][i1];
                    psi += coeff * p.re;
                    grad[0] -= coeff * k0 * p.im;
                    grad[1] -= coeff * k1 * p.im;
                }
            }
        } else {
            for i0 in 0..m {
                let p0 = phases[0][i0];
                let chi0 = self.chi[i0];
                if chi0 == 0.0 {
                    continue;
                }
                let k0 = self.kappa[i0];
                for i1 in 0..m {
                    let c01 = chi0 * self.chi[i1];
                    if c01 == 0.0 {
                        continue;
                    }
                    let k1 = self.kappa[i1];
                    let p01 = p0 * phases[1][i1];
                    let kk01 = k0 * k0 + k1 * k1 + mu2;
                    for i2 in 0..m {
                        let c = c01 * self.chi[i2];
                        if c == 0.0 {
                            continue;
                        }
                        let k2 = self.kappa[i2];
                        let coeff = c / (kk01 + k2 * k2);
                        let p = p01 * phases[2][i2];
                        psi += coeff * p.re;
                        grad[0] -= coeff * k0 * p.im;
                        grad[1] -= coeff * k1 * p.im;
                        grad[2] -= coeff * k2 * p.im;
                    }
                }
            }
        }
        let inv_vol = 1.0 / self.dom.length().powi(D as i32);
        psi *= inv_vol;
        for g in &mut grad {
            *g *= inv_vol;
        }
        (psi, grad)
    }

    /// Materializes the kernel on the real-space grid `x_m = m L / grid`.
    /// The result is exactly even: `t[m] == t[-m mod grid]` per axis.
    /// Memory is `16 * grid^d` bytes transiently; intended for diagnostics
    /// and tests, not for fine 3D lattices.
    pub fn real_space_table(&self) -> Vec<f64> {
        let d = self.dom.dim();
        let m = self.grid;
        let dims = vec![m; d];
        let total: usize = dims.iter().product();
        let mu2 = self.mu * self.mu;
        let mut buf = vec![Complex64::default(); total];
        for (flat, v) in buf.iter_mut().enumerate() {
            let mut rest = flat;
            let mut kk = 0.0;
            let mut chi = 1.0;
            for _ in 0..d {
                let idx = rest % m;
                rest /= m;
                kk += self.kappa[idx] * self.kappa[idx];
                chi *= self.chi[idx];
            }
            *v = Complex64::new(chi / (kk + mu2), 0.0);
        }
        NdFft::new(&dims).inverse(&mut buf);
        let inv_vol = 1.0 / self.dom.length().powi(d as i32);
        let mut table: Vec<f64> = buf.iter().map(|c| c.re * inv_vol).collect();
        // The spectrum is exactly even, so the imaginary residue is pure
        // round-off; enforce evenness of the real part bit-exactly.
        let neg = |flat: usize| -> usize {
            let mut rest = flat;
            let mut out = 0;
            let mut scale = 1;
            let mut idxs = [0usize; 3];
            for a in (0..d).rev() {
                idxs[a] = rest % m;
                rest /= m;
            }
            for a in (0..d).rev() {
                let ni = (m - idxs[a]) % m;
                out += ni * scale;
                scale *= m;
            }
            out
        };
        for flat in 0..total {
            let other = neg(flat);
            if other > flat {
                let avg = 0.5 * (table[flat] + table[other]);
                table[flat] = avg;
                table[other] = avg;
            }
        }
        table
    }
}

enum Component {
    Exponential { mu: f64, alpha: f64 },
    Screened { alpha: f64, table: SpectralTable },
}

/// A fully materialized reference interaction on a given domain, ready to
/// evaluate total energies and forces.
pub struct ReferencePotential {
    dom: Domain,
    spec: KernelSpec,
    components: Vec<Component>,
}

/// Optional per-component spectral resolution override, `(grid, eps_smooth)`.
pub type SpectralOverride = Option<(usize, Option<f64>)>;

impl ReferencePotential {
    /// Builds the potential, auto-sizing any spectral grids.
    pub fn new(dom: &Domain, spec: &KernelSpec) -> Result<Self> {
        Self::with_spectral(dom, spec, [None, None])
    }

    /// Builds the potential with explicit spectral resolutions where given;
    /// `overrides[i]` applies to component `i`.
    pub fn with_spectral(
        dom: &Domain,
        spec: &KernelSpec,
        overrides: [SpectralOverride; 2],
    ) -> Result<Self> {
        spec.validate()?;
        let mut components = Vec::new();
        for (ci, (kind, mu, alpha)) in spec.components().into_iter().enumerate() {
            components.push(match kind {
                ComponentKind::Exponential => Component::Exponential { mu, alpha },
                ComponentKind::Screened => {
                    let table = match overrides[ci] {
                        Some((grid, eps)) => SpectralTable::new(dom, mu, grid, eps)?,
                        None => {
                            let grid = SpectralTable::auto_grid(dom, mu)?;
                            SpectralTable::new(dom, mu, grid, None)?
                        }
                    };
                    Component::Screened { alpha, table }
                }
            });
        }
        Ok(Self {
            dom: *dom,
            spec: *spec,
            components,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.dom
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Spectral grid sizes actually in use, one entry per component
    /// (`None` for exponential components).
    pub fn spectral_grids(&self) -> Vec<Option<usize>> {
        self.components
            .iter()
            .map(|c| match c {
                Component::Exponential { .. } => None,
                Component::Screened { table, .. } => Some(table.grid()),
            })
            .collect()
    }

    /// Pair energy and its gradient with respect to the displacement.
    pub fn pair_energy_grad(&self, delta: &[f64]) -> (f64, [f64; 3]) {
        let d = self.dom.dim();
        let mut psi = 0.0;
        let mut grad = [0.0f64; 3];
        for comp in &self.components {
            match comp {
                Component::Exponential { mu, alpha } => {
                    let r = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let e = alpha * (-mu * r).exp();
                    psi += e;
                    // d/d delta of exp(-mu r) = -mu exp(-mu r) * delta / r.
                    let scale = -mu * e / r;
                    for a in 0..d {
                        grad[a] += scale * delta[a];
                    }
                }
                Component::Screened { alpha, table } => {
                    let (p, g) = table.psi_and_grad(delta);
                    psi += alpha * p;
                    for a in 0..d {
                        grad[a] += alpha * g[a];
                    }
                }
            }
        }
        (psi, grad)
    }

    /// Total energy `sum_{i<j} psi(x_i - x_j)` and per-particle forces
    /// `F = -grad U` for a flattened configuration. Any pair closer than
    /// `min_sep` (or exactly coincident) is rejected.
    pub fn energy_and_forces(&self, positions: &[f64], min_sep: f64) -> Result<(f64, Vec<f64>)> {
        let d = self.dom.dim();
        if positions.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: positions.len(),
                context: "positions length must be a multiple of the dimension".into(),
            });
        }
        let n = positions.len() / d;
        let mut delta = [0.0f64; 3];
        let mut forces = vec![0.0f64; n * d];
        let mut energy = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                self.dom
                    .displacement(&positions[i * d..(i + 1) * d], &positions[j * d..(j + 1) * d], &mut delta[..d]);
                let dist = delta[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
                if dist < min_sep || dist == 0.0 {
                    return Err(Error::ParticlesTooClose {
                        i,
                        j,
                        dist,
                        delta_min: min_sep,
                    });
                }
                let (psi, grad) = self.pair_energy_grad(&delta[..d]);
                energy += psi;
                for a in 0..d {
                    forces[i * d + a] -= grad[a];
                    forces[j * d + a] += grad[a];
                }
            }
        }
        Ok((energy, forces))
    }
}

/// Sampling plan for a generated dataset.
#[derive(Debug, Clone, Copy)]
pub struct SamplerParams {
    pub n_particles: usize,
    pub delta_min: f64,
    pub n_sample: usize,
    pub seed: u64,
}

/// Generates `n_sample` labelled snapshots. Snapshot `i` is drawn from RNG
/// stream `i` of `seed`, so the result is bit-reproducible and independent
/// of the evaluation order; snapshots are labelled in parallel. Every
/// snapshot is self-checked: separations respect `delta_min` and forces
/// sum to zero within [`FORCE_BALANCE_TOL`].
pub fn generate_snapshots(
    potential: &ReferencePotential,
    sampler: &SamplerParams,
) -> Result<Vec<Snapshot>> {
    let dom = *potential.domain();
    (0..sampler.n_sample)
        .into_par_iter()
        .map(|idx| -> Result<Snapshot> {
            let mut rng = snapshot_rng(sampler.seed, idx as u64);
            let positions =
                sample_configuration(&dom, sampler.n_particles, sampler.delta_min, &mut rng)?;
            let (energy, forces) = potential.energy_and_forces(&positions, sampler.delta_min)?;
            if !energy.is_finite() || forces.iter().any(|f| !f.is_finite()) {
                return Err(Error::NonFinite(format!("labels of snapshot {idx}")));
            }
            let d = dom.dim();
            let scale = forces.iter().fold(1.0f64, |m, &f| m.max(f.abs()));
            for a in 0..d {
                let total: f64 = forces.iter().skip(a).step_by(d).sum();
                if total.abs() > FORCE_BALANCE_TOL * scale {
                    return Err(Error::NonFinite(format!(
                        "force balance violated on snapshot {idx}: component {a} sums to {total:e}"
                    )));
                }
            }
            Ok(Snapshot {
                positions,
                energy,
                forces,
            })
        })
        .collect()
}

/// Generates a complete dataset with its header.
pub fn generate_dataset(
    potential: &ReferencePotential,
    sampler: &SamplerParams,
) -> Result<Dataset> {
    let snapshots = generate_snapshots(potential, sampler)?;
    let spec = potential.spec();
    let header = DatasetHeader {
        d: potential.domain().dim(),
        n_particles: sampler.n_particles,
        n_sample: sampler.n_sample,
        length: potential.domain().length(),
        kind: spec.kind,
        mu1: spec.mu1,
        mu2: spec.mu2,
        alpha1: spec.alpha1,
        alpha2: spec.alpha2,
        delta_min: sampler.delta_min,
        seed: sampler.seed,
    };
    Ok(Dataset { header, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn screened_spec(mu: f64) -> KernelSpec {
        KernelSpec {
            kind: KernelKind::ScreenedCoulomb,
            mu1: mu,
            mu2: 0.0,
            alpha1: 1.0,
            alpha2: 0.0,
        }
    }

    /// Periodized 1D Yukawa kernel: image sum of `exp(-mu |x|) / (2 mu)`
    /// in closed form (geometric series).
    fn image_sum_1d(r: f64, length: f64, mu: f64) -> f64 {
        ((-mu * r).exp() + (-mu * (length - r)).exp()) / (2.0 * mu * (1.0 - (-mu * length).exp()))
    }

    #[test]
    fn kernel_spec_validation() {
        let good = KernelSpec {
            kind: KernelKind::Mixed,
            mu1: 5.0,
            mu2: 0.5,
            alpha1: 0.5,
            alpha2: 0.5,
        };
        assert!(good.validate().is_ok());
        assert_eq!(good.components().len(), 2);

        let single = screened_spec(2.0);
        assert!(single.validate().is_ok());
        assert_eq!(single.components().len(), 1);

        for bad in [
            KernelSpec { mu1: 0.0, ..good },
            KernelSpec { mu2: -1.0, ..good },
            KernelSpec { mu1: 0.4, ..good }, // mu1 <= mu2
            KernelSpec { alpha1: 0.4, alpha2: 0.6, ..good },
            KernelSpec { alpha1: 0.7, alpha2: 0.2, ..good }, // sum != 1
            KernelSpec { mu1: f64::NAN, ..good },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn exponential_pair_energy_and_forces() {
        let dom = Domain::new(1, 10.0).unwrap();
        let spec = KernelSpec {
            kind: KernelKind::Exponential,
            mu1: 1.0,
            mu2: 0.0,
            alpha1: 1.0,
            alpha2: 0.0,
        };
        let pot = ReferencePotential::new(&dom, &spec).unwrap();
        let positions = [0.0, 1.0];
        let (u, f) = pot.energy_and_forces(&positions, 0.01).unwrap();
        let e1 = (-1.0f64).exp();
        assert_relative_eq!(u, e1, epsilon = 1e-15);
        // The pair repels: particle 0 is pushed to smaller x.
        assert_relative_eq!(f[0], -e1, epsilon = 1e-15);
        assert_relative_eq!(f[1], e1, epsilon = 1e-15);

        // Forces match -dU/dx by central differences.
        let h = 1e-6;
        for i in 0..2 {
            let mut plus = positions;
            let mut minus = positions;
            plus[i] += h;
            minus[i] -= h;
            let (up, _) = pot.energy_and_forces(&plus, 0.01).unwrap();
            let (um, _) = pot.energy_and_forces(&minus, 0.01).unwrap();
            assert_relative_eq!(f[i], -(up - um) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn auto_grids_match_expected_resolutions() {
        let d5 = Domain::new(1, 5.0).unwrap();
        let d50 = Domain::new(1, 50.0).unwrap();
        assert_eq!(SpectralTable::auto_grid(&d5, 0.5).unwrap(), 48);
        assert_eq!(SpectralTable::auto_grid(&d5, 10.0).unwrap(), 768);
        assert_eq!(SpectralTable::auto_grid(&d50, 5.0).unwrap(), 4096);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let dom = Domain::new(1, 5.0).unwrap();
        match SpectralTable::new(&dom, 10.0, 32, None) {
            Err(Error::GridTooCoarse { grid, .. }) => assert_eq!(grid, 32),
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
        assert!(SpectralTable::new(&dom, 10.0, 31, None).is_err()); // odd
        assert!(SpectralTable::new(&dom, 10.0, 16, None).is_err()); // too small
    }

    #[test]
    fn screened_1d_matches_image_sum() {
        let dom = Domain::new(1, 50.0).unwrap();
        let table = SpectralTable::new(&dom, 5.0, 4096, None).unwrap();
        assert_relative_eq!(table.coeff0(), 1.0 / 25.0, epsilon = 1e-15);

        let (psi, _) = table.psi_and_grad(&[1.0]);
        assert_relative_eq!(psi, 6.7379e-4, max_relative = 1e-2);
        // Compare where the kernel is above the absolute accuracy floor of
        // the damped series (~1e-10); beyond a few screening lengths the
        // exact value decays below it and relative error loses meaning.
        for r in [0.2, 0.5, 1.0, 1.6] {
            let (psi, _) = table.psi_and_grad(&[r]);
            let exact = image_sum_1d(r, 50.0, 5.0);
            assert_relative_eq!(psi, exact, max_relative = 1e-2);
        }

        // A long screening length keeps the kernel significant across the
        // whole box; the image sum must match at all separations outside
        // the smoothing width sqrt(2 eps) ~ 0.15 of the contact kink.
        let dom = Domain::new(1, 5.0).unwrap();
        let table = SpectralTable::new(&dom, 0.5, 48, None).unwrap();
        for r in [0.5, 1.0, 1.8, 2.5] {
            let (psi, _) = table.psi_and_grad(&[r]);
            let exact = image_sum_1d(r, 5.0, 0.5);
            assert_relative_eq!(psi, exact, max_relative = 1e-2);
        }
    }

    #[test]
    fn screened_1d_gradient_matches_differences() {
        let dom = Domain::new(1, 5.0).unwrap();
        let table = SpectralTable::new(&dom, 2.0, 192, None).unwrap();
        let h = 1e-5;
        for r in [0.3, 1.1, 2.4] {
            let (_, g) = table.psi_and_grad(&[r]);
            let (pp, _) = table.psi_and_grad(&[r + h]);
            let (pm, _) = table.psi_and_grad(&[r - h]);
            assert_relative_eq!(g[0], (pp - pm) / (2.0 * h), max_relative = 1e-7);
        }
    }

    #[test]
    fn screened_3d_matches_free_space_value() {
        // Wide box, short screening length: the periodic kernel at r = 1
        // is the free-space value exp(-mu r) / (4 pi r) to high accuracy.
        let dom = Domain::new(3, 20.0).unwrap();
        let table = SpectralTable::new(&dom, 2.0, 512, Some(1.2e-3)).unwrap();
        let (psi, grad) = table.psi_and_grad(&[1.0, 0.0, 0.0]);
        let free = (-2.0f64).exp() / (4.0 * std::f64::consts::PI);
        assert_relative_eq!(psi, free, max_relative = 1e-2);
        assert_relative_eq!(psi, 1.0768e-2, max_relative = 1e-2);
        // Radial symmetry up to the ~1e-4 anisotropy of the truncated
        // cubic mode lattice.
        let r = [0.6, 0.8, 0.0];
        let (psi_rot, _) = table.psi_and_grad(&r);
        assert_relative_eq!(psi_rot, psi, max_relative = 1e-3);
        // Gradient points inward along the displacement.
        assert!(grad[0] < 0.0);
        assert_relative_eq!(grad[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn real_space_table_is_real_and_even() {
        for (d, grid, mu, len) in [(1usize, 96usize, 1.0, 5.0), (2, 96, 1.0, 5.0)] {
            let dom = Domain::new(d, len).unwrap();
            let table = SpectralTable::new(&dom, mu, grid, None).unwrap();
            let values = table.real_space_table();
            assert_eq!(values.len(), grid.pow(d as u32));
            assert!(values.iter().all(|v| v.is_finite()));
            let neg = |flat: usize| -> usize {
                if d == 1 {
                    (grid - flat % grid) % grid
                } else {
                    let (i0, i1) = (flat / grid, flat % grid);
                    ((grid - i0) % grid) * grid + (grid - i1) % grid
                }
            };
            for flat in 0..values.len() {
                assert_eq!(values[flat].to_bits(), values[neg(flat)].to_bits());
            }
            // Grid values agree with direct series evaluation.
            let h = len / grid as f64;
            for &m in &[1usize, grid / 3, grid / 2 + 1] {
                let x: Vec<f64> = match d {
                    1 => vec![m as f64 * h],
                    _ => vec![m as f64 * h, 0.0],
                };
                let (psi, _) = table.psi_and_grad(&x);
                let flat = if d == 1 { m } else { m * grid };
                assert_relative_eq!(values[flat], psi, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn mixed_kernel_is_sum_of_components() {
        let dom = Domain::new(1, 5.0).unwrap();
        let spec = KernelSpec {
            kind: KernelKind::Mixed,
            mu1: 5.0,
            mu2: 0.5,
            alpha1: 0.5,
            alpha2: 0.5,
        };
        let pot = ReferencePotential::new(&dom, &spec).unwrap();
        assert_eq!(pot.spectral_grids(), vec![None, Some(48)]);
        let table = SpectralTable::new(&dom, 0.5, 48, None).unwrap();
        let delta = [0.8];
        let (psi, grad) = pot.pair_energy_grad(&delta);
        let (ps, gs) = table.psi_and_grad(&delta);
        let exp_part = 0.5 * (-5.0f64 * 0.8).exp();
        assert_relative_eq!(psi, exp_part + 0.5 * ps, epsilon = 1e-14);
        let exp_grad = -5.0 * exp_part;
        assert_relative_eq!(grad[0], exp_grad + 0.5 * gs[0], epsilon = 1e-14);
    }

    #[test]
    fn close_pairs_are_rejected() {
        let dom = Domain::new(1, 5.0).unwrap();
        let pot = ReferencePotential::new(&dom, &screened_spec(1.0)).unwrap();
        let err = pot.energy_and_forces(&[0.0, 0.01], 0.05).unwrap_err();
        assert!(matches!(err, Error::ParticlesTooClose { i: 0, j: 1, .. }));
        // Coincident pairs are rejected even with min_sep = 0.
        let err = pot.energy_and_forces(&[1.0, 1.0], 0.0).unwrap_err();
        assert!(matches!(err, Error::ParticlesTooClose { .. }));
    }

    #[test]
    fn generated_snapshots_balance_forces_and_reproduce() {
        let dom = Domain::new(1, 5.0).unwrap();
        let pot = ReferencePotential::new(&dom, &screened_spec(0.5)).unwrap();
        let sampler = SamplerParams {
            n_particles: 10,
            delta_min: 0.05,
            n_sample: 5,
            seed: 99,
        };
        let ds = generate_dataset(&pot, &sampler).unwrap();
        assert_eq!(ds.snapshots.len(), 5);
        assert_eq!(ds.header.kind, KernelKind::ScreenedCoulomb);
        for snap in &ds.snapshots {
            assert!(crate::domain::min_pair_distance(&dom, &snap.positions) >= 0.05);
            let total: f64 = snap.forces.iter().sum();
            let scale = snap.forces.iter().fold(1.0f64, |m, &f| m.max(f.abs()));
            assert!(total.abs() <= FORCE_BALANCE_TOL * scale);
        }
        let again = generate_dataset(&pot, &sampler).unwrap();
        assert_eq!(again, ds);

        // Forces are the exact FD gradient of the labelled energy.
        let snap = &ds.snapshots[0];
        let h = 1e-6;
        for i in 0..snap.positions.len() {
            let mut plus = snap.positions.clone();
            let mut minus = snap.positions.clone();
            plus[i] += h;
            minus[i] -= h;
            let (up, _) = pot.energy_and_forces(&plus, 0.0).unwrap();
            let (um, _) = pot.energy_and_forces(&minus, 0.0).unwrap();
            let fd = -(up - um) / (2.0 * h);
            assert_relative_eq!(snap.forces[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
