//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. Variants carry enough context to be
/// actionable from a CLI without re-deriving internal state.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "could not place {n} particles with minimum separation {delta_min} \
         in a box of side {length} after {restarts} restarts"
    )]
    InfeasiblePacking {
        n: usize,
        delta_min: f64,
        length: f64,
        restarts: usize,
    },

    #[error("particles closer than the minimum separation {delta_min}: pair ({i}, {j}) at distance {dist}")]
    ParticlesTooClose {
        i: usize,
        j: usize,
        dist: f64,
        delta_min: f64,
    },

    #[error(
        "spectral grid of {grid} points per axis is too coarse for screening length 1/{mu}: \
         relative tail coefficient {tail:e} exceeds {limit:e}"
    )]
    GridTooCoarse {
        grid: usize,
        mu: f64,
        tail: f64,
        limit: f64,
    },

    #[error("FFT grid of {grid} modes per axis is too small for the spreading stencil (need at least {min_grid})")]
    GridTooSmall { grid: usize, min_grid: usize },

    #[error("imaginary residue {residue:e} exceeds {limit:e}; inputs are inconsistent with a real field")]
    ImagResidueTooLarge { residue: f64, limit: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("a particle has {required} neighbors but lists are sized for {capacity}; raise the neighbor capacity to at least {required}")]
    NeighborOverflow { required: usize, capacity: usize },

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("model/data mismatch: {0}")]
    ModelMismatch(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
