//! Model-based REINFORCE for deterministic policies.
//!
//! Because the transition density of the discretized dynamics is known in
//! closed form, the gradient of the expected return of a deterministic
//! policy `mu` can be written without a critic:
//!
//! `grad E[G_0] = E[ sum_t ( -dt mu(s_t) + G_0 sqrt(dt) eta_{t+1} ) grad mu(s_t) ]`
//!
//! where `sqrt(dt) eta_{t+1}` is the action score of the transition density.
//! The first term differentiates the control cost, the second the path
//! probability. Every batch is sampled with the current parameters and
//! discarded after one Adam ascent step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{return_of, sample_trajectory, EnvConfig, Policy, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, Evaluation};
use crate::nn::{Adam, MlpParams, MlpSpec};
use crate::rng::{Purpose, StreamKey};

/// States per batched backward pass; bounds memory on long trajectories.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinforceConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_gradient_steps: usize,
    pub test_every: usize,
    /// Trajectories per evaluation.
    pub k_test: usize,
    pub hidden: Vec<usize>,
    /// Half-width of the uniform initialization of the output layer.
    pub final_layer_halfwidth: f64,
    /// Set by the driver from the top-level configuration.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub env: EnvConfig,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            learning_rate: 5e-4,
            n_gradient_steps: 10_000,
            test_every: 100,
            k_test: 1000,
            hidden: vec![32, 32],
            final_layer_halfwidth: 1e-2,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.test_every == 0 || self.k_test == 0 {
            return Err(Error::InvalidConfig("test_every and k_test must be >= 1".into()));
        }
        Ok(())
    }

    pub fn policy_spec(&self) -> Result<MlpSpec> {
        MlpSpec::with_hidden(1, &self.hidden, 1)
    }

    /// Initial policy parameters, drawn from the init stream of `seed`.
    pub fn initial_params(&self) -> Result<MlpParams> {
        let mut rng = StreamKey::new(self.seed, Purpose::Init, 0).rng(0);
        MlpParams::init(&self.policy_spec()?, self.final_layer_halfwidth, &mut rng)
    }

    /// Held-out stream shared by every evaluation of a run.
    pub fn eval_key(&self) -> StreamKey {
        StreamKey::new(self.seed, Purpose::Eval, 0)
    }

    /// Training stream of gradient step `step`.
    pub fn train_key(&self, step: usize) -> StreamKey {
        StreamKey::new(self.seed, Purpose::Train, step as u64)
    }
}

/// Contribution of one trajectory to the return gradient (not yet averaged).
///
/// `index` identifies the trajectory in error messages. Fails if a recorded
/// action differs from `params` evaluated at the recorded state, i.e. the
/// trajectory was sampled by a different policy.
pub fn trajectory_gradient(
    params: &MlpParams,
    traj: &Trajectory,
    config: &EnvConfig,
    index: usize,
) -> Result<MlpParams> {
    let g0 = return_of(traj);
    let dt = config.dt;
    let sqrt_dt = dt.sqrt();
    let mut grad = params.zeros_like();
    let mut offset = 0;
    for chunk in traj.transitions.chunks(CHUNK) {
        let states: Vec<f64> = chunk.iter().map(|t| t.state).collect();
        let cache = params.forward_cached(&states, states.len())?;
        let mu = cache.output();
        let mut upstream = Vec::with_capacity(chunk.len());
        for (j, (t, &m)) in chunk.iter().zip(mu).enumerate() {
            if (m - t.action).abs() > 1e-12 * (1.0 + m.abs()) {
                return Err(Error::OffPolicyBatch {
                    index,
                    step: offset + j,
                });
            }
            upstream.push(-dt * m + g0 * sqrt_dt * t.noise);
        }
        let g = params.backward_cached(&cache, &upstream, true, false)?;
        grad.add_scaled(1.0, g.params.as_ref().expect("requested"))?;
        offset += chunk.len();
    }
    Ok(grad)
}

/// Batch-mean gradient of the expected return `E[G_0]` (the negative cost),
/// so an optimizer should ascend it. Truncated trajectories are rejected.
pub fn estimate_gradient(
    batch: &[Trajectory],
    params: &MlpParams,
    config: &EnvConfig,
) -> Result<MlpParams> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty gradient batch".into()));
    }
    if let Some(index) = batch.iter().position(|t| t.truncated) {
        return Err(Error::TruncatedTrajectory { index });
    }
    let parts: Vec<MlpParams> = batch
        .par_iter()
        .enumerate()
        .map(|(i, t)| trajectory_gradient(params, t, config, i))
        .collect::<Result<_>>()?;
    // Fixed summation order keeps runs bit-reproducible under any scheduling.
    let mut total = params.zeros_like();
    for p in &parts {
        total.add_scaled(1.0, p)?;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok(total)
}

/// One evaluation of the policy during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestPoint {
    pub step: usize,
    pub l2_error: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    pub truncated_count: usize,
}

impl TestPoint {
    fn new(step: usize, e: Evaluation) -> Self {
        Self {
            step,
            l2_error: e.l2_error,
            mean_return: e.mean_return,
            mean_length: e.mean_length,
            truncated_count: e.truncated_count,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReinforceRecord {
    pub test_points: Vec<TestPoint>,
    /// Mean return of each training batch (completed trajectories only).
    pub batch_returns: Vec<f64>,
    /// Truncated trajectories dropped from each training batch.
    pub batch_truncated: Vec<usize>,
    /// Parameters at every test point, paired with the gradient step.
    pub checkpoints: Vec<(usize, MlpParams)>,
    pub final_params: MlpParams,
}

/// Runs REINFORCE from freshly initialized parameters.
pub fn train_reinforce<Q: Policy + ?Sized>(
    config: &ReinforceConfig,
    reference: &Q,
) -> Result<ReinforceRecord> {
    train_reinforce_with(config, reference, |_, _| {})
}

/// As [`train_reinforce`], calling `observer` after every evaluation.
pub fn train_reinforce_with<Q, F>(
    config: &ReinforceConfig,
    reference: &Q,
    mut observer: F,
) -> Result<ReinforceRecord>
where
    Q: Policy + ?Sized,
    F: FnMut(&TestPoint, &MlpParams),
{
    config.validate()?;
    let env = &config.env;
    let mut params = config.initial_params()?;
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut record = ReinforceRecord {
        test_points: Vec::new(),
        batch_returns: Vec::with_capacity(config.n_gradient_steps),
        batch_truncated: Vec::with_capacity(config.n_gradient_steps),
        checkpoints: Vec::new(),
        final_params: params.clone(),
    };
    let mut evaluate = |step: usize, params: &MlpParams, record: &mut ReinforceRecord| -> Result<()> {
        let e = evaluate_policy(params, reference, env, config.eval_key(), config.k_test)?;
        let point = TestPoint::new(step, e);
        observer(&point, params);
        record.test_points.push(point);
        record.checkpoints.push((step, params.clone()));
        Ok(())
    };

    evaluate(0, &params, &mut record)?;
    for step in 0..config.n_gradient_steps {
        let key = config.train_key(step);
        let snapshot = &params;
        let trajectories: Vec<Trajectory> = (0..config.batch_size as u64)
            .into_par_iter()
            .map(|k| sample_trajectory(snapshot, env, &mut key.noise(k)))
            .collect();
        let (done, truncated): (Vec<Trajectory>, Vec<Trajectory>) =
            trajectories.into_iter().partition(|t| !t.truncated);
        if done.is_empty() {
            return Err(Error::AllTruncated(truncated.len()));
        }
        let grad = estimate_gradient(&done, &params, env)?;
        record
            .batch_returns
            .push(done.iter().map(return_of).sum::<f64>() / done.len() as f64);
        record.batch_truncated.push(truncated.len());
        drop(done);

        let mut ascent = grad;
        ascent.scale(-1.0);
        adam.step(&mut params, &ascent)?;

        let completed = step + 1;
        if completed % config.test_every == 0 || completed == config.n_gradient_steps {
            evaluate(completed, &params, &mut record)?;
        }
    }
    record.final_params = params;
    Ok(record)
}
