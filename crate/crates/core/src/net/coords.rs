//! Pair coordinate transforms feeding the short-range descriptors.
//!
//! For a minimum-image pair displacement `delta` the short-range nets
//! consume a geometric input `in1` (normalized distance in 1D, the unit
//! displacement vector in 2D/3D) and a normalized inverse distance
//! `r_hat` that both enters the second net and weights the descriptor
//! sums. Normalization constants are frozen once calibrated, so the
//! transforms carry no trainable state: only a plain backward (for
//! forces) and a tangent-carrying forward (for training) are needed.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Input normalization frozen at calibration time.
///
/// `u_mean`/`u_std` standardize the per-channel long-range potential
/// traces before they enter the fitting network; they stay at the
/// identity for short-range models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub s_mean: f64,
    pub s_std: f64,
    pub r_mean: f64,
    pub r_std: f64,
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
}

impl Default for NormStats {
    fn default() -> Self {
        Self::identity(0)
    }
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            s_mean: 0.0,
            s_std: 1.0,
            r_mean: 0.0,
            r_std: 1.0,
            u_mean: vec![0.0; channels],
            u_std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.s_mean, self.s_std, self.r_mean, self.r_std]
            .iter()
            .chain(&self.u_mean)
            .chain(&self.u_std)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("normalization statistics".into()));
        }
        if self.s_std <= 0.0 || self.r_std <= 0.0 || self.u_std.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig(
                "normalization standard deviations must be positive".into(),
            ));
        }
        if self.u_mean.len() != self.u_std.len() {
            return Err(Error::InvalidConfig(
                "normalization channel counts disagree".into(),
            ));
        }
        Ok(())
    }
}

/// Geometric inputs of one interacting pair.
#[derive(Debug, Clone, Copy)]
pub struct PairCoords {
    pub dist: f64,
    /// First `d` entries are the input row of the first short-range net.
    pub in1: [f64; 3],
    pub r_hat: f64,
}

impl PairCoords {
    pub fn compute(d: usize, delta: &[f64], norm: &NormStats) -> Self {
        let mut dist2 = 0.0;
        for &v in &delta[..d] {
            dist2 += v * v;
        }
        let dist = dist2.sqrt();
        let mut in1 = [0.0; 3];
        if d == 1 {
            in1[0] = (dist - norm.s_mean) / norm.s_std;
        } else {
            for a in 0..d {
                in1[a] = delta[a] / dist;
            }
        }
        let r_hat = (1.0 / dist - norm.r_mean) / norm.r_std;
        Self { dist, in1, r_hat }
    }

    /// Cotangent on `delta` given cotangents on `in1` and `r_hat`.
    pub fn backward(
        &self,
        d: usize,
        delta: &[f64],
        in1_bar: &[f64],
        r_hat_bar: f64,
        norm: &NormStats,
        delta_bar: &mut [f64],
    ) {
        let dist = self.dist;
        let mut dist_bar = -r_hat_bar / (dist * dist * norm.r_std);
        if d == 1 {
            dist_bar += in1_bar[0] / norm.s_std;
            delta_bar[0] = delta[0].signum() * dist_bar;
            return;
        }
        let mut proj = 0.0;
        for a in 0..d {
            proj += in1_bar[a] * delta[a];
        }
        let scale = (dist_bar - proj / (dist * dist)) / dist;
        for a in 0..d {
            delta_bar[a] = in1_bar[a] / dist + scale * delta[a];
        }
    }
}

/// Pair coordinates carrying directional derivatives along a position
/// tangent. No backward counterpart exists: positions are leaves and
/// the transform has no parameters, so the training reverse sweep stops
/// at the network inputs.
#[derive(Debug, Clone, Copy)]
pub struct PairCoordsDual {
    pub plain: PairCoords,
    pub dist_dot: f64,
    pub in1_dot: [f64; 3],
    pub r_hat_dot: f64,
}

impl PairCoordsDual {
    pub fn compute(d: usize, delta: &[f64], delta_dot: &[f64], norm: &NormStats) -> Self {
        let plain = PairCoords::compute(d, delta, norm);
        let dist = plain.dist;
        let mut in1_dot = [0.0; 3];
        let dist_dot;
        if d == 1 {
            dist_dot = delta[0].signum() * delta_dot[0];
            in1_dot[0] = dist_dot / norm.s_std;
        } else {
            let mut dd = 0.0;
            for a in 0..d {
                dd += delta[a] * delta_dot[a];
            }
            dist_dot = dd / dist;
            for a in 0..d {
                in1_dot[a] = delta_dot[a] / dist - delta[a] * dist_dot / (dist * dist);
            }
        }
        let r_hat_dot = -dist_dot / (dist * dist * norm.r_std);
        Self {
            plain,
            dist_dot,
            in1_dot,
            r_hat_dot,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stats() -> NormStats {
        NormStats {
            s_mean: 0.3,
            s_std: 1.7,
            r_mean: 0.2,
            r_std: 0.9,
            u_mean: vec![],
            u_std: vec![],
        }
    }

    #[test]
    fn norm_stats_validate() {
        assert!(NormStats::identity(2).validate().is_ok());
        let mut bad = NormStats::identity(1);
        bad.r_std = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = NormStats::identity(1);
        bad.u_std[0] = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let norm = stats();
        let deltas: [&[f64]; 3] = [&[0.7], &[0.4, -0.9], &[0.3, -0.5, 0.8]];
        let in1_bar = [0.37, -1.1, 0.62];
        let r_hat_bar = -0.81;
        for (d, delta) in deltas.iter().enumerate().map(|(i, s)| (i + 1, *s)) {
            let pc = PairCoords::compute(d, delta, &norm);
            let mut delta_bar = [0.0; 3];
            pc.backward(d, delta, &in1_bar[..d], r_hat_bar, &norm, &mut delta_bar);

            let scalar = |delta: &[f64]| -> f64 {
                let pc = PairCoords::compute(d, delta, &norm);
                let mut s = r_hat_bar * pc.r_hat;
                for a in 0..d {
                    s += in1_bar[a] * pc.in1[a];
                }
                s
            };
            let h = 1e-6;
            for a in 0..d {
                let mut dp = delta.to_vec();
                let mut dm = delta.to_vec();
                dp[a] += h;
                dm[a] -= h;
                let fd = (scalar(&dp) - scalar(&dm)) / (2.0 * h);
                assert_relative_eq!(delta_bar[a], fd, max_relative = 1e-6, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dual_matches_directional_finite_differences() {
        let norm = stats();
        let deltas: [&[f64]; 3] = [&[-0.6], &[0.5, 0.8], &[-0.4, 0.7, 0.2]];
        let dots: [&[f64]; 3] = [&[0.9], &[-0.3, 0.4], &[0.6, -0.2, -0.5]];
        for d in 1..=3usize {
            let delta = deltas[d - 1];
            let dot = dots[d - 1];
            let dual = PairCoordsDual::compute(d, delta, dot, &norm);

            let h = 1e-6;
            let dp: Vec<f64> = delta.iter().zip(dot).map(|(a, b)| a + h * b).collect();
            let dm: Vec<f64> = delta.iter().zip(dot).map(|(a, b)| a - h * b).collect();
            let pp = PairCoords::compute(d, &dp, &norm);
            let pm = PairCoords::compute(d, &dm, &norm);
            assert_relative_eq!(
                dual.dist_dot,
                (pp.dist - pm.dist) / (2.0 * h),
                max_relative = 1e-6,
                epsilon = 1e-10
            );
            assert_relative_eq!(
                dual.r_hat_dot,
                (pp.r_hat - pm.r_hat) / (2.0 * h),
                max_relative = 1e-6,
                epsilon = 1e-10
            );
            for a in 0..d {
                assert_relative_eq!(
                    dual.in1_dot[a],
                    (pp.in1[a] - pm.in1[a]) / (2.0 * h),
                    max_relative = 1e-6,
                    epsilon = 1e-10
                );
            }
        }
    }
}
