//! Small in-place complex FFT over 1-3 axes of a row-major buffer.
//!
//! Wraps `rustfft` plans per axis; transforms are unnormalized in both
//! directions (forward uses `e^{-2 pi i k m / M}`), matching the discrete
//! sums written out by the callers. Plans are immutable and shareable
//! across threads; scratch is allocated per call.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct NdFft {
    dims: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl NdFft {
    pub fn new(dims: &[usize]) -> Self {
        assert!(!dims.is_empty() && dims.len() <= 3);
        let mut planner = FftPlanner::new();
        let fwd = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            dims: dims.to_vec(),
            fwd,
            inv,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inv);
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        assert_eq!(data.len(), self.len());
        let n_axes = self.dims.len();
        for axis in 0..n_axes {
            let len = self.dims[axis];
            let stride: usize = self.dims[axis + 1..].iter().product();
            let plan = &plans[axis];
            let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
            if stride == 1 {
                for line in data.chunks_exact_mut(len) {
                    plan.process_with_scratch(line, &mut scratch);
                }
            } else {
                let outer: usize = self.dims[..axis].iter().product();
                let mut line = vec![Complex64::default(); len];
                for o in 0..outer {
                    let base = o * len * stride;
                    for s in 0..stride {
                        for (k, v) in line.iter_mut().enumerate() {
                            *v = data[base + k * stride + s];
                        }
                        plan.process_with_scratch(&mut line, &mut scratch);
                        for (k, v) in line.iter().enumerate() {
                            data[base + k * stride + s] = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Signed frequency of FFT bin `idx` on a grid of `m` points:
/// `0, 1, ..., ceil(m/2)-1, -floor(m/2), ..., -1`.
pub(crate) fn signed_freq(idx: usize, m: usize) -> i64 {
    debug_assert!(idx < m);
    if idx < m.div_ceil(2) {
        idx as i64
    } else {
        idx as i64 - m as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn naive_dft(dims: &[usize], data: &[Complex64], sign: f64) -> Vec<Complex64> {
        let total: usize = dims.iter().product();
        let unflatten = |mut f: usize| -> Vec<usize> {
            let mut idx = vec![0; dims.len()];
            for a in (0..dims.len()).rev() {
                idx[a] = f % dims[a];
                f /= dims[a];
            }
            idx
        };
        (0..total)
            .map(|kf| {
                let k = unflatten(kf);
                let mut acc = Complex64::default();
                for (mf, &v) in data.iter().enumerate() {
                    let m = unflatten(mf);
                    let phase: f64 = k
                        .iter()
                        .zip(&m)
                        .zip(dims)
                        .map(|((&ki, &mi), &n)| (ki * mi) as f64 / n as f64)
                        .sum();
                    acc += v * Complex64::cis(sign * 2.0 * std::f64::consts::PI * phase);
                }
                acc
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_on_composite_sizes() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for dims in [vec![12], vec![15], vec![6, 10], vec![4, 3, 5]] {
            let total: usize = dims.iter().product();
            let data: Vec<Complex64> = (0..total)
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let plan = NdFft::new(&dims);

            let mut fwd = data.clone();
            plan.forward(&mut fwd);
            for (a, b) in fwd.iter().zip(naive_dft(&dims, &data, -1.0)) {
                assert_relative_eq!(a.re, b.re, epsilon = 1e-10);
                assert_relative_eq!(a.im, b.im, epsilon = 1e-10);
            }

            let mut inv = data.clone();
            plan.inverse(&mut inv);
            for (a, b) in inv.iter().zip(naive_dft(&dims, &data, 1.0)) {
                assert_relative_eq!(a.re, b.re, epsilon = 1e-10);
                assert_relative_eq!(a.im, b.im, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn round_trip_recovers_input_after_normalization() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let dims = [5, 14];
        let total = 70;
        let data: Vec<Complex64> = (0..total)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let plan = NdFft::new(&dims);
        let mut buf = data.clone();
        plan.forward(&mut buf);
        plan.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&data) {
            assert_relative_eq!(a.re / total as f64, b.re, epsilon = 1e-12);
            assert_relative_eq!(a.im / total as f64, b.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn signed_freq_covers_symmetric_band() {
        assert_eq!(
            (0..5).map(|i| signed_freq(i, 5)).collect::<Vec<_>>(),
            vec![0, 1, 2, -2, -1]
        );
        assert_eq!(
            (0..6).map(|i| signed_freq(i, 6)).collect::<Vec<_>>(),
            vec![0, 1, 2, -3, -2, -1]
        );
    }
}
