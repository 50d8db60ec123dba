//! Neural interatomic potentials on periodic domains.
//!
//! The crate combines a short-range descriptor network with a long-range
//! energy channel evaluated through a fast periodic convolution (non-uniform
//! FFT with a trainable Fourier-space multiplier). It ships:
//!
//! - [`domain`]: torus geometry and reproducible configuration sampling,
//! - [`dataset`]: the binary snapshot format used by generators and trainers,
//! - [`refdata`]: reference potentials (exponential and screened-Coulomb)
//!   with exact periodic energies and forces for dataset generation,
//! - [`nufft`]: the fast convolution layer and its derivatives,
//! - [`net`]: the potential model (descriptors, fitting network, losses),
//! - [`train`]: staged Adam training, evaluation and scaling benchmarks.

pub mod dataset;
pub mod domain;
mod error;
pub mod net;
pub mod nufft;
pub mod refdata;
pub mod train;

pub use error::{Error, Result};
