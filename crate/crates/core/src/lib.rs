//! Shock-particle dynamics and kinetic jump statistics for scalar
//! conservation laws `rho_t = H(x, t, rho)_x` with Markovian data.
//!
//! The crate has two solution pipelines that describe the same random
//! object and are cross-validated statistically:
//!
//! * a particle pipeline: exact samplers for Markov initial profiles
//!   ([`pdmp`]) evolved by event-driven shock dynamics ([`shockline`]);
//! * a field pipeline: the drift PDE solved along characteristics
//!   ([`drift`]) and kinetic integro-PDEs for the jump kernel and the
//!   boundary marginal ([`kinetic`]).
//!
//! [`validate`] holds the independent oracles (a Godunov reference solver,
//! identity-residual suites, KS machinery) and the two-sided comparison;
//! [`htransform`] conditions jump kernels on confinement events.

pub mod drift;
pub mod error;
pub mod grid;
pub mod htransform;
pub mod io;
pub mod kinetic;
pub mod model;
pub mod ode;
pub mod pdmp;
pub mod quad;
pub mod rng;
pub mod shockline;
pub mod stats;
pub mod validate;

pub use error::{CoreError, Result};
pub use grid::Axis;
pub use model::{Drift, Flavor, HamiltonianModel, LagrangianModel};
