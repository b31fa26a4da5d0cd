//! Federated-learning simulator for comparing unbiased client-sampling
//! strategies: uniform, data-ratio, gradient-norm importance sampling,
//! diversity-plus-variance sampling, their stale-statistics variants,
//! cluster-based IS and the biased power-of-choice baseline.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod vector;

pub use error::{Error, Result};
