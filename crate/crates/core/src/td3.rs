//! Model-free deterministic policy gradient with twin delayed critics (TD3).
//!
//! Transitions from noisy rollouts go into a replay buffer. Every
//! `train_every` environment steps the critics take `critic_updates_per_train`
//! Adam steps on the mean squared Bellman error against a clipped double-Q
//! target with smoothed target actions; every `policy_delay`-th of those the
//! actor ascends the first critic and all target networks are Polyak-averaged.
//! The objective is undiscounted; only entry into the target set cuts the
//! bootstrap, time-limit truncation does not.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{env_step, EnvConfig, Policy, Transition};
use crate::error::{Error, Result};
use crate::metrics::evaluate_policy;
use crate::nn::{Adam, MlpParams, MlpSpec};
use crate::rng::{NoiseSource, Purpose, StreamKey};

/// Fixed-capacity FIFO of transitions, sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    /// Next slot to overwrite once full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.data.split_at(self.cursor);
        older.iter().chain(newer)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        assert!(!self.data.is_empty(), "sampling from an empty replay buffer");
        let mut batch = Batch::with_capacity(n);
        for _ in 0..n {
            batch.push(&self.data[rng.random_range(0..self.data.len())]);
        }
        batch
    }
}

/// Columns of a minibatch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            states: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n),
            done: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, t: &Transition) {
        self.states.push(t.state);
        self.actions.push(t.action);
        self.rewards.push(t.reward);
        self.next_states.push(t.next_state);
        self.done.push(t.done);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub buffer_capacity: usize,
    /// Environment steps with uniformly random actions before training starts.
    pub learning_starts: u64,
    pub max_episode_steps: u64,
    pub batch_size: usize,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub train_every: u64,
    pub critic_updates_per_train: usize,
    pub policy_delay: usize,
    pub sigma_expl: f64,
    pub sigma_target: f64,
    pub polyak: f64,
    pub action_low: f64,
    pub action_high: f64,
    pub n_episodes: usize,
    pub test_every: usize,
    pub k_test: usize,
    pub hidden: Vec<usize>,
    pub actor_final_halfwidth: f64,
    pub critic_final_halfwidth: f64,
    /// Stop at the first evaluation whose L2 error is at or below this value.
    pub stop_at_l2: Option<f64>,
    /// Set by the driver from the top-level configuration.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub env: EnvConfig,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            buffer_capacity: 1_000_000,
            learning_starts: 10_000,
            max_episode_steps: 1000,
            batch_size: 1000,
            actor_learning_rate: 1e-4,
            critic_learning_rate: 1e-4,
            train_every: 100,
            critic_updates_per_train: 100,
            policy_delay: 2,
            sigma_expl: 1.0,
            sigma_target: 0.2,
            polyak: 0.995,
            action_low: -5.0,
            action_high: 5.0,
            n_episodes: 10_000,
            test_every: 100,
            k_test: 1000,
            hidden: vec![32, 32],
            actor_final_halfwidth: 1e-2,
            critic_final_halfwidth: 1e-3,
            stop_at_l2: None,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.polyak > 0.0 && self.polyak < 1.0) {
            return bad("polyak must lie in (0, 1)");
        }
        if !(self.action_low < self.action_high) {
            return bad("action_low must be below action_high");
        }
        if self.policy_delay == 0 || self.train_every == 0 || self.test_every == 0 {
            return bad("policy_delay, train_every and test_every must be >= 1");
        }
        if self.batch_size == 0 || self.k_test == 0 || self.max_episode_steps == 0 {
            return bad("batch_size, k_test and max_episode_steps must be >= 1");
        }
        if !(self.sigma_expl >= 0.0 && self.sigma_target >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be >= 1");
        }
        Ok(())
    }

    /// The environment with this run's episode cap.
    pub fn episode_env(&self) -> EnvConfig {
        EnvConfig {
            max_episode_steps: self.max_episode_steps,
            ..self.env.clone()
        }
    }

    pub fn clip(&self, a: f64) -> f64 {
        a.clamp(self.action_low, self.action_high)
    }
}

/// Online networks, their target copies, and the optimizer states.
#[derive(Debug, Clone)]
pub struct ActorCriticState {
    pub actor: MlpParams,
    pub critic1: MlpParams,
    pub critic2: MlpParams,
    pub actor_target: MlpParams,
    pub critic1_target: MlpParams,
    pub critic2_target: MlpParams,
    pub actor_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
}

impl ActorCriticState {
    /// Fresh networks from the init stream of `config.seed`; targets start as
    /// exact copies.
    pub fn new(config: &Td3Config) -> Result<Self> {
        let key = StreamKey::new(config.seed, Purpose::Init, 0);
        let actor_spec = MlpSpec::with_hidden(1, &config.hidden, 1)?;
        let critic_spec = MlpSpec::with_hidden(2, &config.hidden, 1)?;
        let actor = MlpParams::init(&actor_spec, config.actor_final_halfwidth, &mut key.rng(0))?;
        let critic1 = MlpParams::init(&critic_spec, config.critic_final_halfwidth, &mut key.rng(1))?;
        let critic2 = MlpParams::init(&critic_spec, config.critic_final_halfwidth, &mut key.rng(2))?;
        Ok(Self::from_nets(actor, critic1, critic2, config))
    }

    pub fn from_nets(actor: MlpParams, critic1: MlpParams, critic2: MlpParams, config: &Td3Config) -> Self {
        Self {
            actor_opt: Adam::new(actor.len(), config.actor_learning_rate),
            critic1_opt: Adam::new(critic1.len(), config.critic_learning_rate),
            critic2_opt: Adam::new(critic2.len(), config.critic_learning_rate),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
        }
    }

    /// `Q_1(s, a)`.
    pub fn q1(&self, s: f64, a: f64) -> f64 {
        self.critic1.forward_pair(s, a)
    }
}

/// Exploration action `clip(mu(s) + sigma_expl * eps)`.
pub fn select_action<R: Rng + ?Sized>(actor: &MlpParams, s: f64, config: &Td3Config, rng: &mut R) -> f64 {
    let eps: f64 = rng.sample(StandardNormal);
    config.clip(actor.forward_scalar(s) + config.sigma_expl * eps)
}

/// Uniform action on `[action_low, action_high)` used before training starts.
pub fn warmup_action<R: Rng + ?Sized>(config: &Td3Config, rng: &mut R) -> f64 {
    rng.random_range(config.action_low..config.action_high)
}

fn interleave(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect()
}

/// Bellman targets `r + (1 - d) min_i Q'_i(s', a~)` with
/// `a~ = clip(mu'(s') + sigma_target * eps)`.
pub fn compute_targets<R: Rng + ?Sized>(
    batch: &Batch,
    state: &ActorCriticState,
    config: &Td3Config,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let mu = state.actor_target.forward_batch(&batch.next_states, n)?;
    let smoothed: Vec<f64> = mu
        .iter()
        .map(|&m| {
            let eps: f64 = rng.sample(StandardNormal);
            config.clip(m + config.sigma_target * eps)
        })
        .collect();
    let input = interleave(&batch.next_states, &smoothed);
    let q1 = state.critic1_target.forward_batch(&input, n)?;
    let q2 = state.critic2_target.forward_batch(&input, n)?;
    Ok((0..n)
        .map(|i| {
            if batch.done[i] {
                batch.rewards[i]
            } else {
                batch.rewards[i] + q1[i].min(q2[i])
            }
        })
        .collect())
}

/// Mean squared Bellman error `(1/n) sum (Q(s, a) - y)^2` and its parameter
/// gradient.
pub fn critic_loss_and_gradient(critic: &MlpParams, batch: &Batch, targets: &[f64]) -> Result<(f64, MlpParams)> {
    let n = batch.len();
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    let input = interleave(&batch.states, &batch.actions);
    let cache = critic.forward_cached(&input, n)?;
    let residual: Vec<f64> = cache.output().iter().zip(targets).map(|(q, y)| q - y).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r / n as f64).collect();
    let g = critic.backward_cached(&cache, &upstream, true, false)?;
    Ok((loss, g.params.expect("requested")))
}

/// One Adam descent step for each critic on shared targets. Returns the two
/// losses before the step.
pub fn critic_update(batch: &Batch, targets: &[f64], state: &mut ActorCriticState) -> Result<(f64, f64)> {
    let (l1, g1) = critic_loss_and_gradient(&state.critic1, batch, targets)?;
    let (l2, g2) = critic_loss_and_gradient(&state.critic2, batch, targets)?;
    state.critic1_opt.step(&mut state.critic1, &g1)?;
    state.critic2_opt.step(&mut state.critic2, &g2)?;
    Ok((l1, l2))
}

/// `(1/n) sum Q(s, mu(s))` over `states` and its gradient in the actor
/// parameters, chaining the critic's action-input gradient through the actor.
pub fn actor_objective_and_gradient(
    actor: &MlpParams,
    critic: &MlpParams,
    states: &[f64],
) -> Result<(f64, MlpParams)> {
    let n = states.len();
    let actor_cache = actor.forward_cached(states, n)?;
    let input = interleave(states, actor_cache.output());
    let critic_cache = critic.forward_cached(&input, n)?;
    let objective = critic_cache.output().iter().sum::<f64>() / n as f64;
    let ones = vec![1.0 / n as f64; n];
    let dq = critic.backward_cached(&critic_cache, &ones, false, true)?;
    let dq_da: Vec<f64> = dq
        .inputs
        .expect("requested")
        .chunks_exact(2)
        .map(|row| row[1])
        .collect();
    let g = actor.backward_cached(&actor_cache, &dq_da, true, false)?;
    Ok((objective, g.params.expect("requested")))
}

/// One Adam ascent step of the actor on the first critic.
pub fn actor_update(batch: &Batch, state: &mut ActorCriticState) -> Result<f64> {
    let (objective, mut grad) = actor_objective_and_gradient(&state.actor, &state.critic1, &batch.states)?;
    grad.scale(-1.0);
    state.actor_opt.step(&mut state.actor, &grad)?;
    Ok(objective)
}

/// `target <- rho target + (1 - rho) online`, elementwise.
pub fn polyak_average(target: &mut MlpParams, online: &MlpParams, rho: f64) -> Result<()> {
    if target.dims() != online.dims() {
        return Err(Error::ShapeMismatch {
            expected: target.len(),
            got: online.len(),
        });
    }
    for (t, o) in target.as_mut_slice().iter_mut().zip(online.as_slice()) {
        *t = rho * *t + (1.0 - rho) * o;
    }
    Ok(())
}

pub fn soft_update(state: &mut ActorCriticState, rho: f64) -> Result<()> {
    polyak_average(&mut state.actor_target, &state.actor, rho)?;
    polyak_average(&mut state.critic1_target, &state.critic1, rho)?;
    polyak_average(&mut state.critic2_target, &state.critic2, rho)
}

/// One training phase: `critic_updates_per_train` critic steps, with an actor
/// step and a soft target update after every `policy_delay`-th of them.
pub fn training_phase<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    state: &mut ActorCriticState,
    config: &Td3Config,
    rng: &mut R,
) -> Result<()> {
    for j in 0..config.critic_updates_per_train {
        let batch = buffer.sample(config.batch_size, rng);
        let targets = compute_targets(&batch, state, config, rng)?;
        critic_update(&batch, &targets, state)?;
        if j % config.policy_delay == 0 {
            actor_update(&batch, state)?;
            soft_update(state, config.polyak)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Td3TestPoint {
    pub episode: usize,
    pub l2_error: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    pub truncated_count: usize,
}

#[derive(Debug, Clone)]
pub struct Td3Record {
    pub test_points: Vec<Td3TestPoint>,
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    /// Actor parameters at every test point, paired with the episode count.
    pub checkpoints: Vec<(usize, MlpParams)>,
    pub total_steps: u64,
    pub state: ActorCriticState,
}

impl Td3Record {
    pub fn min_l2_error(&self) -> f64 {
        self.test_points
            .iter()
            .map(|p| p.l2_error)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn train_td3<Q: Policy + ?Sized>(config: &Td3Config, reference: &Q) -> Result<Td3Record> {
    train_td3_with(config, reference, |_, _| {})
}

/// As [`train_td3`], calling `observer` after every evaluation.
pub fn train_td3_with<Q, F>(config: &Td3Config, reference: &Q, mut observer: F) -> Result<Td3Record>
where
    Q: Policy + ?Sized,
    F: FnMut(&Td3TestPoint, &ActorCriticState),
{
    config.validate()?;
    let env = config.episode_env();
    let eval_key = StreamKey::new(config.seed, Purpose::Eval, 0);
    let mut replay_rng: ChaCha8Rng = StreamKey::new(config.seed, Purpose::Replay, 0).rng(0);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut record = Td3Record {
        test_points: Vec::new(),
        episode_returns: Vec::with_capacity(config.n_episodes),
        episode_lengths: Vec::with_capacity(config.n_episodes),
        checkpoints: Vec::new(),
        total_steps: 0,
        state: ActorCriticState::new(config)?,
    };

    // Evaluation rollouts use their own stream and never touch the buffer.
    let evaluate = |episode: usize, record: &mut Td3Record, observer: &mut F| -> Result<bool> {
        let e = evaluate_policy(&record.state.actor, reference, &env, eval_key, config.k_test)?;
        let point = Td3TestPoint {
            episode,
            l2_error: e.l2_error,
            mean_return: e.mean_return,
            mean_length: e.mean_length,
            truncated_count: e.truncated_count,
        };
        observer(&point, &record.state);
        record.test_points.push(point);
        record.checkpoints.push((episode, record.state.actor.clone()));
        Ok(config.stop_at_l2.is_some_and(|t| point.l2_error <= t))
    };

    if evaluate(0, &mut record, &mut observer)? {
        return Ok(record);
    }
    for episode in 0..config.n_episodes {
        let key = StreamKey::new(config.seed, Purpose::Train, episode as u64);
        let mut noise = key.noise(0);
        let mut explore = key.rng(1);
        let mut s = env.s_init;
        let mut ret = 0.0;
        let mut length = 0;
        for _ in 0..env.max_episode_steps {
            let a = if record.total_steps < config.learning_starts {
                warmup_action(config, &mut explore)
            } else {
                select_action(&record.state.actor, s, config, &mut explore)
            };
            let eta = noise.next_eta();
            let out = env_step(s, a, eta, &env);
            buffer.push(Transition {
                state: s,
                action: a,
                reward: out.reward,
                next_state: out.next_state,
                done: out.done,
                noise: eta,
            });
            ret += out.reward;
            length += 1;
            record.total_steps += 1;
            if record.total_steps >= config.learning_starts && record.total_steps % config.train_every == 0 {
                training_phase(&buffer, &mut record.state, config, &mut replay_rng)?;
            }
            if out.done {
                break;
            }
            s = out.next_state;
        }
        record.episode_returns.push(ret);
        record.episode_lengths.push(length);
        let completed = episode + 1;
        if (completed % config.test_every == 0 || completed == config.n_episodes)
            && evaluate(completed, &mut record, &mut observer)?
        {
            break;
        }
    }
    Ok(record)
}

/// One cell of the Q-value / advantage table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdvantageRow {
    pub s: f64,
    pub a: f64,
    pub q_value: f64,
    pub advantage: f64,
    /// Maximizer of `q(s, .)` over the action grid, repeated on every row of `s`.
    pub greedy_action: f64,
}

/// `q(s, a)`, `q(s, a) - q(s, policy(s))` and the grid-greedy action for
/// every pair of the state and action grids.
pub fn advantage_table<Qf, P>(q: Qf, policy: &P, states: &[f64], actions: &[f64]) -> Vec<AdvantageRow>
where
    Qf: Fn(f64, f64) -> f64,
    P: Policy + ?Sized,
{
    let mut rows = Vec::with_capacity(states.len() * actions.len());
    for &s in states {
        let v = q(s, policy.action(s));
        let qs: Vec<f64> = actions.iter().map(|&a| q(s, a)).collect();
        let greedy = qs
            .iter()
            .zip(actions)
            .fold((f64::NEG_INFINITY, f64::NAN), |best, (&qv, &a)| if qv > best.0 { (qv, a) } else { best })
            .1;
        rows.extend(actions.iter().zip(&qs).map(|(&a, &qv)| AdvantageRow {
            s,
            a,
            q_value: qv,
            advantage: qv - v,
            greedy_action: greedy,
        }));
    }
    rows
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}
