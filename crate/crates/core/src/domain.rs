//! Periodic simulation domain and reproducible configuration sampling.
//!
//! All geometry lives on the torus `[0, L)^d` with `d` in 1..=3. Positions
//! are stored flattened, row-major: coordinate `a` of particle `i` sits at
//! `x[i * d + a]`. Sampling is rejection-based with a minimum pairwise
//! separation and is deterministic given a seed and a snapshot index.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Attempts to place a single particle before the snapshot is restarted.
pub const MAX_POINT_RETRIES: usize = 1000;
/// Snapshot restarts before sampling gives up as infeasible.
pub const MAX_SNAPSHOT_RESTARTS: usize = 100;

/// Cubic periodic box `[0, L)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    d: usize,
    length: f64,
}

impl Domain {
    /// Creates a torus of dimension `d` (1, 2 or 3) and side `length > 0`.
    pub fn new(d: usize, length: f64) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidDomain(format!(
                "dimension must be 1, 2 or 3, got {d}"
            )));
        }
        if !length.is_finite() || length <= 0.0 {
            return Err(Error::InvalidDomain(format!(
                "box side must be finite and positive, got {length}"
            )));
        }
        Ok(Self { d, length })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Wraps a scalar coordinate into `[0, L)`.
    pub fn wrap(&self, x: f64) -> f64 {
        let r = x.rem_euclid(self.length);
        // rem_euclid can round up to exactly L for tiny negative inputs.
        if r >= self.length {
            0.0
        } else {
            r
        }
    }

    /// Wraps every coordinate of a flattened position buffer in place.
    pub fn wrap_all(&self, xs: &mut [f64]) {
        for x in xs {
            *x = self.wrap(*x);
        }
    }

    /// Maps a scalar separation into the symmetric interval `[-L/2, L/2)`.
    pub fn min_image(&self, delta: f64) -> f64 {
        let r = delta.rem_euclid(self.length);
        let r = if r >= self.length { 0.0 } else { r };
        if r >= 0.5 * self.length {
            r - self.length
        } else {
            r
        }
    }

    /// Minimum-image displacement `a - b`, one component per dimension.
    pub fn displacement(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(a.len(), self.d);
        debug_assert_eq!(b.len(), self.d);
        for c in 0..self.d {
            out[c] = self.min_image(a[c] - b[c]);
        }
    }

    /// Torus distance between two points given as `d`-component slices.
    pub fn torus_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for c in 0..self.d {
            let delta = self.min_image(a[c] - b[c]);
            s += delta * delta;
        }
        s.sqrt()
    }
}

/// RNG for snapshot `index` of a dataset drawn with `seed`. Distinct
/// snapshots use distinct ChaCha streams of the same keyed generator, so any
/// subset of snapshots can be regenerated independently and in parallel.
pub fn snapshot_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `n` particle positions uniformly on the torus, rejecting any point
/// closer than `delta_min` to an already accepted one. A point that fails
/// [`MAX_POINT_RETRIES`] times triggers a full restart of the snapshot;
/// after [`MAX_SNAPSHOT_RESTARTS`] restarts the packing is deemed
/// infeasible. Returns positions flattened as `n * d` values in `[0, L)`.
pub fn sample_configuration(
    dom: &Domain,
    n: usize,
    delta_min: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !delta_min.is_finite() || delta_min < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "minimum separation must be finite and non-negative, got {delta_min}"
        )));
    }
    let d = dom.dim();
    let mut positions: Vec<f64> = Vec::with_capacity(n * d);
    let mut candidate = [0.0f64; 3];
    for restart in 0..=MAX_SNAPSHOT_RESTARTS {
        if restart == MAX_SNAPSHOT_RESTARTS {
            return Err(Error::InfeasiblePacking {
                n,
                delta_min,
                length: dom.length(),
                restarts: MAX_SNAPSHOT_RESTARTS,
            });
        }
        positions.clear();
        let mut failed = false;
        'points: for _ in 0..n {
            'retries: for attempt in 0..=MAX_POINT_RETRIES {
                if attempt == MAX_POINT_RETRIES {
                    failed = true;
                    break 'points;
                }
                for c in candidate.iter_mut().take(d) {
                    *c = dom.wrap(rng.random::<f64>() * dom.length());
                }
                for placed in positions.chunks_exact(d) {
                    if dom.torus_distance(placed, &candidate[..d]) < delta_min {
                        continue 'retries;
                    }
                }
                positions.extend_from_slice(&candidate[..d]);
                break;
            }
        }
        if !failed {
            return Ok(positions);
        }
    }
    unreachable!("restart loop returns or errors");
}

/// Smallest pairwise torus distance of a flattened configuration, or
/// `f64::INFINITY` for fewer than two particles.
pub fn min_pair_distance(dom: &Domain, positions: &[f64]) -> f64 {
    let d = dom.dim();
    let n = positions.len() / d;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = dom.torus_distance(&positions[i * d..(i + 1) * d], &positions[j * d..(j + 1) * d]);
            if dist < best {
                best = dist;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_bad_dimensions_and_lengths() {
        assert!(Domain::new(0, 1.0).is_err());
        assert!(Domain::new(4, 1.0).is_err());
        assert!(Domain::new(2, 0.0).is_err());
        assert!(Domain::new(2, -1.0).is_err());
        assert!(Domain::new(2, f64::NAN).is_err());
        assert!(Domain::new(3, 2.5).is_ok());
    }

    #[test]
    fn wrap_lands_in_half_open_box() {
        let dom = Domain::new(1, 5.0).unwrap();
        assert_eq!(dom.wrap(5.0), 0.0);
        assert_eq!(dom.wrap(0.0), 0.0);
        assert_eq!(dom.wrap(-1e-17), 0.0);
        for &x in &[-12.3, -5.0, -0.1, 0.3, 4.999, 5.1, 123.456] {
            let w = dom.wrap(x);
            assert!((0.0..5.0).contains(&w), "wrap({x}) = {w}");
            // Idempotent.
            assert_eq!(dom.wrap(w), w);
            // Same residue class.
            assert_relative_eq!(dom.min_image(w - x), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn min_image_is_symmetric_interval() {
        let dom = Domain::new(1, 4.0).unwrap();
        assert_eq!(dom.min_image(2.0), -2.0); // exactly L/2 maps to -L/2
        assert_eq!(dom.min_image(-2.0), -2.0);
        for &x in &[-7.9, -2.1, -0.4, 0.0, 1.99, 2.0, 3.7, 6.0] {
            let m = dom.min_image(x);
            assert!((-2.0..2.0).contains(&m), "min_image({x}) = {m}");
        }
    }

    #[test]
    fn torus_distance_is_shift_invariant_and_bounded() {
        let dom = Domain::new(3, 3.0).unwrap();
        let a = [0.2, 2.9, 1.5];
        let b = [2.8, 0.1, 1.4];
        let dist = dom.torus_distance(&a, &b);
        let shifted = [a[0] + 3.0, a[1] - 6.0, a[2] + 9.0];
        assert_relative_eq!(dom.torus_distance(&shifted, &b), dist, epsilon = 1e-12);
        assert_relative_eq!(dist, dom.torus_distance(&b, &a), epsilon = 1e-15);
        // Max distance on the torus is L * sqrt(d) / 2.
        assert!(dist <= 3.0 * (3.0f64).sqrt() / 2.0 + 1e-12);
        // Cross-boundary pair is close, not far.
        assert_relative_eq!(
            dom.torus_distance(&[0.1, 0.0, 0.0], &[2.9, 0.0, 0.0]),
            0.2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sampler_respects_minimum_separation() {
        let dom = Domain::new(1, 5.0).unwrap();
        let mut rng = snapshot_rng(11, 0);
        let xs = sample_configuration(&dom, 30, 0.12, &mut rng).unwrap();
        assert_eq!(xs.len(), 30);
        assert!(xs.iter().all(|&x| (0.0..5.0).contains(&x)));
        assert!(min_pair_distance(&dom, &xs) >= 0.12);
    }

    #[test]
    fn sampler_is_deterministic_per_seed_and_stream() {
        let dom = Domain::new(2, 3.0).unwrap();
        let a = sample_configuration(&dom, 12, 0.05, &mut snapshot_rng(7, 3)).unwrap();
        let b = sample_configuration(&dom, 12, 0.05, &mut snapshot_rng(7, 3)).unwrap();
        let c = sample_configuration(&dom, 12, 0.05, &mut snapshot_rng(7, 4)).unwrap();
        let e = sample_configuration(&dom, 12, 0.05, &mut snapshot_rng(8, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, e);
    }

    #[test]
    fn impossible_packing_errors_out() {
        let dom = Domain::new(1, 5.0).unwrap();
        let mut rng = snapshot_rng(1, 0);
        let err = sample_configuration(&dom, 100, 5.0, &mut rng).unwrap_err();
        match err {
            Error::InfeasiblePacking { n, restarts, .. } => {
                assert_eq!(n, 100);
                assert_eq!(restarts, MAX_SNAPSHOT_RESTARTS);
            }
            other => panic!("expected InfeasiblePacking, got {other:?}"),
        }
    }

    #[test]
    fn sample_mean_matches_uniform_law() {
        // 500 snapshots of 20 particles = 1e4 draws per coordinate. The
        // sample mean of U[0, L) has sigma = (L / sqrt(12)) / sqrt(1e4);
        // a fixed seed must land within 3 sigma of L / 2.
        let dom = Domain::new(1, 5.0).unwrap();
        let n_draws = 500 * 20;
        let mut sum = 0.0;
        for snap in 0..500u64 {
            let xs =
                sample_configuration(&dom, 20, 0.05, &mut snapshot_rng(2024, snap)).unwrap();
            sum += xs.iter().sum::<f64>();
        }
        let mean = sum / n_draws as f64;
        let sigma_mean = 5.0 / 12f64.sqrt() / (n_draws as f64).sqrt();
        assert!(
            (mean - 2.5).abs() <= 3.0 * sigma_mean,
            "mean {mean} outside 3 sigma ({sigma_mean}) of 2.5"
        );
    }
}
