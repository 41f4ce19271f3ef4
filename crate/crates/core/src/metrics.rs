//! Policy quality and importance-sampling diagnostics.

use rayon::prelude::*;
use serde::Serialize;

use crate::env::{sample_trajectory, EnvConfig, Policy, Trajectory, ZeroPolicy, work_of};
use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// `sum_t |policy(s_t) - reference(s_t)|^2 dt` over every visited state,
/// including the final one.
pub fn trajectory_l2<P, Q>(traj: &Trajectory, policy: &P, reference: &Q, dt: f64) -> f64
where
    P: Policy + ?Sized,
    Q: Policy + ?Sized,
{
    traj.states()
        .map(|s| {
            let d = policy.action(s) - reference.action(s);
            d * d * dt
        })
        .sum()
}

/// [`trajectory_l2`] for a trajectory sampled by `policy` itself: reuses the
/// recorded actions and evaluates the policy only at the final state.
fn own_trajectory_l2<P, Q>(traj: &Trajectory, policy: &P, reference: &Q, dt: f64) -> f64
where
    P: Policy + ?Sized,
    Q: Policy + ?Sized,
{
    let along: f64 = traj
        .transitions
        .iter()
        .map(|t| {
            let d = t.action - reference.action(t.state);
            d * d * dt
        })
        .sum();
    let last = traj.final_state().map_or(0.0, |s| {
        let d = policy.action(s) - reference.action(s);
        d * d * dt
    });
    along + last
}

/// Mean over the given trajectories of [`trajectory_l2`]. Truncated
/// trajectories contribute their partial sums.
pub fn l2_error<P, Q>(trajectories: &[Trajectory], policy: &P, reference: &Q, dt: f64) -> Result<f64>
where
    P: Policy + ?Sized,
    Q: Policy + ?Sized,
{
    if trajectories.is_empty() {
        return Err(Error::InvalidConfig("l2_error needs at least one trajectory".into()));
    }
    let total: f64 = trajectories
        .iter()
        .map(|t| trajectory_l2(t, policy, reference, dt))
        .sum();
    Ok(total / trajectories.len() as f64)
}

/// Summary of a batch of test rollouts under a fixed policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub l2_error: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    pub truncated_count: usize,
}

/// Rolls out `k` trajectories on the streams `key.noise(0..k)` in parallel
/// and scores them against `reference`. Reusing the same key at every
/// checkpoint evaluates successive policies on common random numbers.
pub fn evaluate_policy<P, Q>(
    policy: &P,
    reference: &Q,
    config: &EnvConfig,
    key: StreamKey,
    k: usize,
) -> Result<Evaluation>
where
    P: Policy + ?Sized,
    Q: Policy + ?Sized,
{
    if k == 0 {
        return Err(Error::InvalidConfig("evaluation needs k >= 1".into()));
    }
    let per: Vec<(f64, f64, usize, bool)> = (0..k as u64)
        .into_par_iter()
        .map(|i| {
            let traj = sample_trajectory(policy, config, &mut key.noise(i));
            let l2 = own_trajectory_l2(&traj, policy, reference, config.dt);
            let ret: f64 = traj.transitions.iter().map(|t| t.reward).sum();
            (l2, ret, traj.hitting_steps(), traj.truncated)
        })
        .collect();
    let n = k as f64;
    Ok(Evaluation {
        l2_error: per.iter().map(|p| p.0).sum::<f64>() / n,
        mean_return: per.iter().map(|p| p.1).sum::<f64>() / n,
        mean_length: per.iter().map(|p| p.2 as f64).sum::<f64>() / n,
        truncated_count: per.iter().filter(|p| p.3).count(),
    })
}

/// Likelihood ratio of the uncontrolled path measure against the controlled
/// one along a recorded trajectory:
/// `exp(-sum a_t sqrt(dt) eta_{t+1} - 1/2 sum a_t^2 dt)`.
pub fn girsanov_weight(traj: &Trajectory, dt: f64) -> f64 {
    girsanov_log_weight(traj, dt).exp()
}

pub fn girsanov_log_weight(traj: &Trajectory, dt: f64) -> f64 {
    let sq = dt.sqrt();
    traj.transitions
        .iter()
        .map(|t| -t.action * sq * t.noise - 0.5 * t.action * t.action * dt)
        .sum()
}

/// Importance-sampling estimate of `E[exp(-work)]` under the uncontrolled
/// dynamics, computed from trajectories of a controlled one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsEstimate {
    pub mean: f64,
    /// Unbiased (n - 1) sample variance of the weighted samples.
    pub sample_variance: f64,
    /// Sample standard deviation over the absolute mean: the relative error
    /// of a single sample. Divide by `sqrt(k)` for the error of the mean.
    pub relative_error: f64,
    /// Mean hitting time in time units (steps times dt).
    pub mean_hitting_time: f64,
    pub k: usize,
    pub truncated_count: usize,
}

impl IsEstimate {
    pub fn standard_error(&self) -> f64 {
        (self.sample_variance / self.k as f64).sqrt()
    }
}

/// Samples `k` controlled trajectories on `key.noise(0..k)` and reweights
/// `exp(-work)` by the path likelihood ratio. Truncated trajectories are
/// dropped and counted; an estimate with no completed trajectory is an error.
pub fn is_estimate<P: Policy + ?Sized>(
    policy: &P,
    config: &EnvConfig,
    key: StreamKey,
    k: usize,
) -> Result<IsEstimate> {
    if k < 2 {
        return Err(Error::InvalidConfig("is_estimate needs k >= 2".into()));
    }
    let per: Vec<Option<(f64, usize)>> = (0..k as u64)
        .into_par_iter()
        .map(|i| {
            let traj = sample_trajectory(policy, config, &mut key.noise(i));
            if traj.truncated {
                return None;
            }
            let log_w = girsanov_log_weight(&traj, config.dt) - work_of(&traj, config);
            Some((log_w.exp(), traj.hitting_steps()))
        })
        .collect();
    let done: Vec<(f64, usize)> = per.iter().flatten().copied().collect();
    let truncated_count = k - done.len();
    if done.len() < 2 {
        return Err(Error::AllTruncated(truncated_count));
    }
    let samples: Vec<f64> = done.iter().map(|d| d.0).collect();
    let (mean, sample_variance) = mean_and_variance(&samples);
    let mean_hitting_time =
        done.iter().map(|d| d.1 as f64).sum::<f64>() / done.len() as f64 * config.dt;
    Ok(IsEstimate {
        mean,
        sample_variance,
        relative_error: sample_variance.sqrt() / mean.abs(),
        mean_hitting_time,
        k: done.len(),
        truncated_count,
    })
}

/// Plain Monte Carlo under the uncontrolled dynamics.
pub fn mc_estimate(config: &EnvConfig, key: StreamKey, k: usize) -> Result<IsEstimate> {
    is_estimate(&ZeroPolicy, config, key, k)
}

/// Sample mean and unbiased variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Trailing moving average; the first `window - 1` entries average whatever
/// history is available.
pub fn running_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_trajectory, Transition};
    use crate::rng::{Purpose, ScriptedNoise};

    fn short_traj() -> Trajectory {
        let c = EnvConfig::default();
        sample_trajectory(&|s: f64| 1.0 - s, &c, &mut ScriptedNoise::new(vec![0.3, -1.1, 0.7]))
    }

    #[test]
    fn l2_of_a_policy_against_itself_is_zero() {
        let c = EnvConfig::default();
        let traj = short_traj();
        let p = |s: f64| s.sin();
        assert_eq!(trajectory_l2(&traj, &p, &p, c.dt), 0.0);
    }

    #[test]
    fn l2_matches_independent_summation() {
        let c = EnvConfig::default();
        let key = StreamKey::new(3, Purpose::Eval, 0);
        let trajs: Vec<Trajectory> = (0..5)
            .map(|i| {
                let mut cfg = c.clone();
                cfg.max_episode_steps = 50;
                sample_trajectory(&|s: f64| 0.5 * s, &cfg, &mut key.noise(i))
            })
            .collect();
        let p = |s: f64| 0.5 * s;
        let q = |s: f64| s * s;
        let got = l2_error(&trajs, &p, &q, c.dt).unwrap();
        // reverse order over trajectories and states
        let mut oracle = 0.0;
        for t in trajs.iter().rev() {
            let mut states: Vec<f64> = t.transitions.iter().map(|x| x.state).collect();
            states.push(t.transitions.last().unwrap().next_state);
            for s in states.iter().rev() {
                oracle += (0.5 * s - s * s).powi(2) * c.dt;
            }
        }
        oracle /= trajs.len() as f64;
        assert!((got - oracle).abs() < 1e-12 * oracle.max(1.0));
        assert!(l2_error(&[], &p, &q, c.dt).is_err());
    }

    #[test]
    fn recorded_actions_give_the_same_l2() {
        let c = EnvConfig::default();
        let p = |s: f64| 0.3 - s;
        let q = |s: f64| s * s;
        for i in 0..4 {
            let traj = sample_trajectory(&p, &c, &mut StreamKey::new(8, Purpose::Eval, 0).noise(i));
            let a = trajectory_l2(&traj, &p, &q, c.dt);
            let b = own_trajectory_l2(&traj, &p, &q, c.dt);
            assert!((a - b).abs() < 1e-12 * a);
        }
    }

    #[test]
    fn zero_control_has_unit_weight() {
        let c = EnvConfig::default();
        let traj = sample_trajectory(&ZeroPolicy, &c, &mut StreamKey::new(1, Purpose::Eval, 0).noise(0));
        assert_eq!(girsanov_weight(&traj, c.dt), 1.0);
    }

    #[test]
    fn weight_matches_hand_computation() {
        let dt = 0.01;
        let mk = |a: f64, eta: f64| Transition {
            state: 0.0,
            action: a,
            reward: 0.0,
            next_state: 0.0,
            done: false,
            noise: eta,
        };
        let traj = Trajectory {
            transitions: vec![mk(1.0, 0.5), mk(-2.0, 0.25)],
            truncated: false,
        };
        let expected = (-(1.0_f64 * 0.1 * 0.5) - 0.5 * dt - (-2.0 * 0.1 * 0.25) - 0.5 * 4.0 * dt).exp();
        assert!((girsanov_weight(&traj, dt) - expected).abs() < 1e-14);
    }

    #[test]
    fn running_mean_window() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(running_mean(&xs, 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(running_mean(&xs, 10), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(running_mean(&xs, 1), xs.to_vec());
    }

    #[test]
    fn sample_statistics() {
        let (m, v) = mean_and_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reweighting_is_unbiased() {
        let mut c = EnvConfig::default();
        c.target_lb = -0.9;
        let p = |s: f64| 0.5 - s;
        let is = is_estimate(&p, &c, StreamKey::new(2, Purpose::Estimate, 0), 20_000).unwrap();
        let mc = mc_estimate(&c, StreamKey::new(2, Purpose::Estimate, 1), 20_000).unwrap();
        let se = (is.standard_error().powi(2) + mc.standard_error().powi(2)).sqrt();
        assert!((is.mean - mc.mean).abs() < 4.0 * se, "{is:?} vs {mc:?}");
    }

    #[test]
    fn all_truncated_is_an_error() {
        let mut c = EnvConfig::default();
        c.max_episode_steps = 1;
        let r = is_estimate(&ZeroPolicy, &c, StreamKey::new(1, Purpose::Estimate, 0), 10);
        assert!(matches!(r, Err(Error::AllTruncated(10))));
    }

    #[test]
    fn evaluation_is_reproducible() {
        let c = EnvConfig::default();
        let key = StreamKey::new(4, Purpose::Eval, 0);
        let p = |s: f64| 1.0 - s;
        let a = evaluate_policy(&p, &ZeroPolicy, &c, key, 16).unwrap();
        let b = evaluate_policy(&p, &ZeroPolicy, &c, key, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.l2_error > 0.0 && a.mean_return < 0.0);
    }
}
