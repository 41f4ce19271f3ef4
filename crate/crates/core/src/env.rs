//! Controlled overdamped Langevin dynamics in the double-well potential
//! `V(s) = alpha (s^2 - 1)^2`, discretized with Euler–Maruyama:
//!
//! ```text
//! s' = s + (-V'(s) + sigma a) dt + sigma sqrt(dt) eta,   sigma = sqrt(2 / beta)
//! ```
//!
//! An episode starts at `s_init` and ends on the first step whose next state
//! lies in the target set `[target_lb, inf)`. Each step pays the running cost
//! `f dt + a^2 dt / 2`; the step that enters the target set additionally pays
//! the terminal cost `g`. Rewards are the negated costs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseSource;

/// Physical and discretization parameters of the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dt: f64,
    pub s_init: f64,
    pub target_lb: f64,
    pub state_lb: f64,
    pub state_ub: f64,
    pub f_const: f64,
    pub g_const: f64,
    pub max_episode_steps: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            dt: 0.005,
            s_init: -1.0,
            target_lb: 1.0,
            state_lb: -2.0,
            state_ub: 2.0,
            f_const: 1.0,
            g_const: 0.0,
            max_episode_steps: 100_000_000,
        }
    }
}

impl EnvConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    /// Diffusion constant `sqrt(2 / beta)`.
    #[inline]
    pub fn sigma(&self) -> f64 {
        (2.0 / self.beta).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.beta,
            self.dt,
            self.s_init,
            self.target_lb,
            self.state_lb,
            self.state_ub,
            self.f_const,
            self.g_const,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("env parameters must be finite".into()));
        }
        if !(self.dt > 0.0 && self.beta > 0.0 && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(
                "env requires dt > 0, beta > 0 and alpha > 0".into(),
            ));
        }
        if self.max_episode_steps < 1 {
            return Err(Error::InvalidConfig("max_episode_steps must be >= 1".into()));
        }
        if self.s_init >= self.target_lb {
            return Err(Error::InvalidConfig(format!(
                "s_init = {} must lie outside the target set [{}, inf)",
                self.s_init, self.target_lb
            )));
        }
        if self.state_lb >= self.state_ub {
            return Err(Error::InvalidConfig("state_lb must be < state_ub".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn potential(s: f64, alpha: f64) -> f64 {
    let q = s * s - 1.0;
    alpha * q * q
}

#[inline]
pub fn grad_potential(s: f64, alpha: f64) -> f64 {
    4.0 * alpha * s * (s * s - 1.0)
}

#[inline]
pub fn is_terminal(s: f64, config: &EnvConfig) -> bool {
    s >= config.target_lb
}

/// Reward for being in `s` and acting with `a`: the negative running cost
/// outside the target set, the negative terminal cost inside it.
#[inline]
pub fn reward(_s: f64, a: f64, terminal: bool, config: &EnvConfig) -> f64 {
    if terminal {
        -config.g_const
    } else {
        -config.f_const * config.dt - 0.5 * a * a * config.dt
    }
}

/// A deterministic feedback control `s -> a`.
pub trait Policy: Sync {
    fn action(&self, s: f64) -> f64;
}

impl<F> Policy for F
where
    F: Fn(f64) -> f64 + Sync,
{
    #[inline]
    fn action(&self, s: f64) -> f64 {
        self(s)
    }
}

/// The uncontrolled dynamics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    #[inline]
    fn action(&self, _s: f64) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: f64,
    pub action: f64,
    pub reward: f64,
    pub next_state: f64,
    /// The step entered the target set.
    pub done: bool,
    /// Standard normal increment used for this step.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: f64,
    pub reward: f64,
    pub done: bool,
}

/// One Euler–Maruyama step driven by the supplied increment `eta`.
#[inline]
pub fn env_step(s: f64, a: f64, eta: f64, config: &EnvConfig) -> StepOutcome {
    let sigma = config.sigma();
    let drift = -grad_potential(s, config.alpha) + sigma * a;
    let next_state = s + drift * config.dt + sigma * config.dt.sqrt() * eta;
    let done = is_terminal(next_state, config);
    let mut r = reward(s, a, false, config);
    if done {
        r += reward(next_state, 0.0, true, config);
    }
    StepOutcome {
        next_state,
        reward: r,
        done,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Hit `max_episode_steps` without reaching the target set.
    pub truncated: bool,
}

impl Trajectory {
    /// Number of steps taken.
    pub fn hitting_steps(&self) -> usize {
        self.transitions.len()
    }

    /// Every visited state `s_0, ..., s_T` including the final one.
    pub fn states(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions
            .iter()
            .map(|t| t.state)
            .chain(self.transitions.last().map(|t| t.next_state))
    }

    pub fn final_state(&self) -> Option<f64> {
        self.transitions.last().map(|t| t.next_state)
    }
}

/// Rolls the policy from `s_init` until the target set is hit or the step
/// cap is reached.
pub fn sample_trajectory<P, N>(policy: &P, config: &EnvConfig, noise: &mut N) -> Trajectory
where
    P: Policy + ?Sized,
    N: NoiseSource + ?Sized,
{
    let mut transitions = Vec::new();
    let mut s = config.s_init;
    for _ in 0..config.max_episode_steps {
        let a = policy.action(s);
        let eta = noise.next_eta();
        let out = env_step(s, a, eta, config);
        transitions.push(Transition {
            state: s,
            action: a,
            reward: out.reward,
            next_state: out.next_state,
            done: out.done,
            noise: eta,
        });
        if out.done {
            return Trajectory {
                transitions,
                truncated: false,
            };
        }
        s = out.next_state;
    }
    Trajectory {
        transitions,
        truncated: true,
    }
}

/// Undiscounted return `G_0`, the sum of recorded rewards.
pub fn return_of(trajectory: &Trajectory) -> f64 {
    trajectory.transitions.iter().map(|t| t.reward).sum()
}

/// Path functional `g(s_T) + sum f dt`, without the control energy. The
/// terminal term is only charged when the target set was reached.
pub fn work_of(trajectory: &Trajectory, config: &EnvConfig) -> f64 {
    let running = trajectory.transitions.len() as f64 * config.f_const * config.dt;
    let terminal = if trajectory.truncated || trajectory.transitions.is_empty() {
        0.0
    } else {
        config.g_const
    };
    terminal + running
}

/// Cost of the trajectory evaluated directly from its states and actions,
/// `g(s_T) + sum f dt + sum a^2 dt / 2`.
pub fn cost_of(trajectory: &Trajectory, config: &EnvConfig) -> f64 {
    let control: f64 = trajectory
        .transitions
        .iter()
        .map(|t| 0.5 * t.action * t.action * config.dt)
        .sum();
    work_of(trajectory, config) + control
}
