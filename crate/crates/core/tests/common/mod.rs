//! Helpers shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, length: f64) -> Vec<f64> {
    (0..n * d).map(|_| rng.random::<f64>() * length).collect()
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Reorders row blocks of width `d`: row `i` of the result is row
/// `perm[i]` of the input.
pub fn apply_permutation(perm: &[usize], rows: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for (new_i, &old_i) in perm.iter().enumerate() {
        out[new_i * d..(new_i + 1) * d].copy_from_slice(&rows[old_i * d..(old_i + 1) * d]);
    }
    out
}

pub fn shuffled_identity(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Relative l2 distance with a zero-safe denominator.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
