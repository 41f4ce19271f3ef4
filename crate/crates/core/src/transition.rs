//! Gaussian transition density of the discretized dynamics and its score in
//! the action. This is the model the REINFORCE estimator differentiates.

use std::f64::consts::PI;

use crate::env::{grad_potential, EnvConfig};

/// `(s' - s) / dt + V'(s) - sigma a`: zero at the mode.
#[inline]
fn drift_residual(s_next: f64, s: f64, a: f64, config: &EnvConfig) -> f64 {
    (s_next - s) / config.dt + grad_potential(s, config.alpha) - config.sigma() * a
}

/// `log p(s' | s, a)` for the one-dimensional Euler–Maruyama kernel.
pub fn transition_log_density(s_next: f64, s: f64, a: f64, config: &EnvConfig) -> f64 {
    let beta = config.beta;
    let dt = config.dt;
    let r = drift_residual(s_next, s, a, config);
    0.5 * (beta / (4.0 * PI * dt)).ln() - 0.25 * beta * dt * r * r
}

/// `d/da log p(s' | s, a)`. For `s'` produced by a step with increment `eta`
/// this equals `sqrt(dt) * eta`.
pub fn grad_action_log_density(s_next: f64, s: f64, a: f64, config: &EnvConfig) -> f64 {
    let r = drift_residual(s_next, s, a, config);
    0.5 * config.beta * config.dt * config.sigma() * r
}
