//! Effective transport of intracellular cargo that switches among
//! diffusive, advective and stationary states.
//!
//! * [`model`]: the n-state model (speeds, diffusivities, conservative rate matrix).
//! * [`spectral`]: effective velocity/diffusivity from the null-space projection
//!   and the dispersion relation.
//! * [`renewal`]: semi-Markov path simulation and renewal-reward estimates.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod frap;
pub mod geometry;
mod linalg;
pub mod model;
pub mod optim;
pub mod pde;
pub mod renewal;
pub mod rng;
pub mod spatial;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{EmbeddedChain, ModelSpec, StationaryDistribution, Violation};
pub use spectral::{EffectiveTransport, Method};
