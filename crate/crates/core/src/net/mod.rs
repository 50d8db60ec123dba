//! Neural potential: short-range descriptors, an optional long-range
//! channel through the fast periodic convolution, and a per-particle
//! fitting network summed into a total energy.
//!
//! Forces come from a hand-written reverse pass; training gradients of
//! the force-matching loss come from a reverse sweep over the
//! tangent-carrying forward (forward-over-reverse is never needed
//! because positions are leaf variables).

pub mod coords;
pub mod fitting;
pub mod mlp;
pub mod model;
pub mod neighbors;

pub use coords::NormStats;
pub use model::{
    Checkpoint, DescriptorConfig, EnergyForces, Mode, ModelGrads, ModelParams,
};
pub use neighbors::{build_interaction_lists, InteractionLists};
