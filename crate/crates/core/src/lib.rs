//! Safety guidance for flow-matching samplers.
//!
//! Repulsive guidance fields against a set of negative examples (MMD energy
//! gradient, SPELL radial force, Safe Denoiser), their time schedules,
//! Gaussian flow-matching dynamics with guided samplers, reach-avoid barrier
//! certificates for time-windowed guidance, and evaluation metrics.

pub mod barrier;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod guidance;
pub mod kernel;
pub mod metrics;
pub mod points;
pub mod rng;
pub mod special;
pub mod verify;

pub use error::{Error, Result};
pub use points::PointSet;
