//! Numerical toolkit for potential mean field games on a finite state space.
//!
//! The crate covers both layers of the problem: the deterministic (inviscid)
//! game/control pair on the probability simplex, and its common-noise
//! (viscous) regularisation driven by a Wright-Fisher diffusion with a
//! boundary repulsion. On top of the solvers sit vanishing-viscosity sweeps,
//! the two-state conservation-law benchmark, and a weak-solution
//! certification suite for candidate master-equation fields.
//!
//! All numerical kernels are generic over the scalar type through
//! [`scalar::Real`]; the `*64` aliases at the crate root fix `f64`, which is
//! what the CLI and the test suites use.

pub mod csvio;
pub mod error;
pub mod scalar;

pub mod inviscid;
pub mod masterweak;
pub mod model;
pub mod parallel;
pub mod selection;
pub mod rng;
pub mod simplex;
pub mod viscous;

pub use error::{Error, Result};
pub use parallel::Workers;
pub use scalar::Real;

/// `f64` aliases for the main domain types.
pub type SimplexPoint64 = simplex::SimplexPoint<f64>;
pub type ChartPoint64 = simplex::ChartPoint<f64>;
pub type GridField64 = simplex::GridField<f64>;
pub type ModelSpec64 = model::ModelSpec<f64>;
pub type ControlMatrix64 = model::ControlMatrix<f64>;
pub type NoiseConfig64 = model::NoiseConfig<f64>;
