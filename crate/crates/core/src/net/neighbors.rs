//! Padded interaction lists.
//!
//! For each particle, the indices of all other particles strictly inside
//! the interaction ball, stored in a fixed-width tensor so descriptor
//! shapes do not depend on the configuration. Real neighbors occupy a
//! compact prefix; the tail is padding. Padding contributes exactly zero
//! to every descriptor (its normalized inverse distance is defined as
//! zero), so iterating the prefix is bit-identical to iterating the full
//! padded row.

use crate::domain::Domain;
use crate::{Error, Result};

/// Sentinel index marking a padding slot.
pub const DUMMY: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct InteractionLists {
    pub n: usize,
    pub n_max: usize,
    /// Row-major `(n, n_max)`; real neighbors first, then [`DUMMY`].
    pub idx: Vec<usize>,
    /// Real neighbors per particle.
    pub counts: Vec<usize>,
}

impl InteractionLists {
    /// The real neighbors of particle `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.idx[i * self.n_max..i * self.n_max + self.counts[i]]
    }

    /// Full padded row of particle `i`.
    pub fn padded_row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.n_max..(i + 1) * self.n_max]
    }

    /// Dummy mask of particle `i`, aligned with [`Self::padded_row`].
    pub fn mask(&self, i: usize) -> impl Iterator<Item = bool> + '_ {
        self.padded_row(i).iter().map(|&j| j != DUMMY)
    }
}

/// Scans all pairs and fills the padded tensor. Fails if any particle has
/// more than `n_max` neighbors, reporting the width that would fit.
pub fn build_interaction_lists(
    positions: &[f64],
    dom: &Domain,
    r_cut: f64,
    n_max: usize,
) -> Result<InteractionLists> {
    let d = dom.dim();
    if positions.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: positions.len(),
            context: "positions length must be a multiple of the dimension".into(),
        });
    }
    if !(r_cut > 0.0) || r_cut >= dom.length() / 2.0 {
        return Err(Error::InvalidConfig(format!(
            "interaction radius must lie in (0, L/2), got {} with L = {}",
            r_cut,
            dom.length()
        )));
    }
    let n = positions.len() / d;
    let mut idx = vec![DUMMY; n * n_max];
    let mut counts = vec![0usize; n];
    let mut worst = 0usize;
    for i in 0..n {
        let xi = &positions[i * d..(i + 1) * d];
        let row = &mut idx[i * n_max..(i + 1) * n_max];
        let mut c = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &positions[j * d..(j + 1) * d];
            if dom.torus_distance(xi, xj) < r_cut {
                if c < n_max {
                    row[c] = j;
                }
                c += 1;
            }
        }
        counts[i] = c.min(n_max);
        worst = worst.max(c);
    }
    if worst > n_max {
        return Err(Error::NeighborOverflow {
            required: worst,
            capacity: n_max,
        });
    }
    Ok(InteractionLists {
        n,
        n_max,
        idx,
        counts,
    })
}
