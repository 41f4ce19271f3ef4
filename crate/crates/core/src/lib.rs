//! Importance sampling of metastable exit events for a one-dimensional
//! double-well Langevin particle, with the zero-variance control learned by
//! policy gradient (REINFORCE with a known transition model) or by TD3, and
//! compared against a finite-difference solution of the linear
//! Hamilton–Jacobi–Bellman boundary value problem.

pub mod cli;
pub mod env;
pub mod error;
pub mod hjb;
pub mod metrics;
pub mod nn;
pub mod reinforce;
pub mod rng;
pub mod td3;
pub mod transition;

pub use error::{Error, Result};
