//! Core library for a desk-scale imitation-learning stack: dynamical movement
//! primitives (DMPs), Gaussian-mixture covariance profiles, a deterministic
//! planar reach/place/push simulator, and covariance-weighted meta-training
//! with behaviour-cloning and segmented-adaptation baselines.
//!
//! Everything is seeded and deterministic: the same seed produces the same
//! demonstrations, the same fits, and the same trained policies, bit for bit.

pub mod baselines;
pub mod config;
pub mod dmp;
pub mod error;
pub mod exec;
pub mod expert;
pub mod gmm;
pub mod loss;
pub mod math;
pub mod meta;
pub mod policy;
pub mod repertoire;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
