//! Core numerics for training diffusion models under KL-divergence
//! distribution constraints with Lagrangian dual ascent.
//!
//! The crate has two tracks that share one dual update:
//!
//! * a neural track ([`net`], [`trainer`], [`sampler`]) that trains a small
//!   noise-prediction network on synthetic Gaussian mixtures, and
//! * an exact tabular track ([`oracle`]) where the primal minimizer is the
//!   closed-form mixture distribution and the optimal dual variables are known.
//!
//! Everything here is `no_std` + `alloc`. Randomness is always passed in
//! explicitly through [`rng::Rng`] handles derived from a run seed.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod distributions;
pub mod dual;
mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
