//! Particle simulation of projected Langevin dynamics for entropic optimal
//! transport, with reference solvers used to check it.

pub mod condexp;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod integrator;
pub mod kdtree;
pub mod lsi;
pub mod model;
pub mod numeric;
pub mod points;
pub mod sinkhorn;

pub use error::{Error, Result};
pub use points::Points;
