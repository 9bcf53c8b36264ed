//! Fractal interpolation bases inside Kolmogorov–Arnold style networks,
//! with baselines, a small reverse-mode differentiation engine, target
//! generators, reference PDE solutions and an experiment harness.

pub mod diffengine;
pub mod basis;
pub mod error;

pub use error::{Error, Result};
pub mod model;
pub mod rng;
pub mod regularize;
pub mod targets;
pub mod pdesolve;
pub mod train;
pub mod bench;
pub mod verify;
