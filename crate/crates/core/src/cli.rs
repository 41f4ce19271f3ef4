//! Experiment driver: configuration, subcommands, run directories and CSV output.
//!
//! Every run writes `manifest.toml` holding the fully resolved configuration
//! and the subcommand with its arguments; `replay <manifest>` re-executes it
//! and reproduces the CSV files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::env::{sample_trajectory, EnvConfig, Policy, ZeroPolicy};
use crate::hjb::{solve_bvp, Grid, HjbPolicy, HjbSolution};
use crate::metrics::{evaluate_policy, is_estimate, running_mean};
use crate::nn::MlpParams;
use crate::reinforce::{train_reinforce_with, ReinforceConfig};
use crate::rng::{Purpose, StreamKey};
use crate::td3::{advantage_table, linspace, train_td3_with, Td3Config};

/// Finite-difference reference solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbSection {
    pub n_nodes: usize,
}

impl Default for HjbSection {
    fn default() -> Self {
        Self { n_nodes: 4001 }
    }
}

/// Settings shared by the evaluation and diagnostic subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Trajectories for `evaluate`.
    pub k_test: usize,
    /// Trajectories per policy for `is-estimate`.
    pub k_estimate: usize,
    /// Window of the running mean written next to training returns.
    pub running_window: usize,
    /// Grid points of policy snapshots and `dump-policy`.
    pub snapshot_points: usize,
    /// State and action grid sizes of the advantage table.
    pub advantage_states: usize,
    pub advantage_actions: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k_test: 1000,
            k_estimate: 1000,
            running_window: 100,
            snapshot_points: 201,
            advantage_states: 41,
            advantage_actions: 101,
        }
    }
}

/// The complete configuration of a run. An empty file yields the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core. Does not affect results.
    pub threads: usize,
    pub env: EnvConfig,
    pub hjb: HjbSection,
    pub reinforce: ReinforceConfig,
    pub td3: Td3Config,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            threads: 0,
            env: EnvConfig::default(),
            hjb: HjbSection::default(),
            reinforce: ReinforceConfig::default(),
            td3: Td3Config::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("invalid configuration")
    }

    pub fn reinforce_config(&self) -> ReinforceConfig {
        ReinforceConfig {
            seed: self.seed,
            env: self.env.clone(),
            ..self.reinforce.clone()
        }
    }

    pub fn td3_config(&self) -> Td3Config {
        Td3Config {
            seed: self.seed,
            env: self.env.clone(),
            ..self.td3.clone()
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            bail!("seed must be at most {}", i64::MAX);
        }
        self.env.validate()?;
        Ok(())
    }
}

/// Command-line overrides shared by all subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inverse temperature.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Time step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// REINFORCE gradient steps.
    #[arg(long)]
    pub n_gradient_steps: Option<usize>,
    /// TD3 training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Parent directory of the run directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
    /// TD3 exploration noise.
    #[arg(long)]
    pub sigma_expl: Option<f64>,
    /// TD3 target smoothing noise.
    #[arg(long)]
    pub sigma_target: Option<f64>,
}

impl Overrides {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.beta {
            cfg.env.beta = v;
        }
        if let Some(v) = self.dt {
            cfg.env.dt = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.n_gradient_steps {
            cfg.reinforce.n_gradient_steps = v;
        }
        if let Some(v) = self.episodes {
            cfg.td3.n_episodes = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.sigma_expl {
            cfg.td3.sigma_expl = v;
        }
        if let Some(v) = self.sigma_target {
            cfg.td3.sigma_target = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "langevin-soc", version, about = "Importance sampling of metastable exits with learned controls")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the reference boundary value problem; writes hjb_solution.csv.
    HjbSolve(Overrides),
    /// Train a policy with model-based REINFORCE.
    RunReinforce(Overrides),
    /// Train an actor and twin critics with TD3.
    RunTd3(Overrides),
    /// L2 error, return and hitting time of a saved policy.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Policy checkpoint (.mlp).
        #[arg(long)]
        policy: PathBuf,
        /// hjb_solution.csv, or the hjb-solve run directory containing it.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Importance-sampling estimates of E[exp(-work)] under several controls.
    IsEstimate {
        #[command(flatten)]
        overrides: Overrides,
        /// `zero`, `hjb`, or a policy checkpoint; repeatable.
        #[arg(long = "policy", default_values = ["zero", "hjb"])]
        policies: Vec<String>,
    },
    /// Tabulate a policy on the state grid and dump one controlled trajectory.
    DumpPolicy {
        #[command(flatten)]
        overrides: Overrides,
        /// `zero`, `hjb`, or a policy checkpoint.
        #[arg(long, default_value = "hjb")]
        policy: String,
    },
    /// Q-values, advantages and the greedy policy of a TD3 critic.
    AdvantageTable {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        actor: PathBuf,
        #[arg(long)]
        critic: PathBuf,
    },
    /// Re-run the task recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// A subcommand with its resolved arguments, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    HjbSolve,
    RunReinforce,
    RunTd3,
    Evaluate { policy: PathBuf, reference: PathBuf },
    IsEstimate { policies: Vec<String> },
    DumpPolicy { policy: String },
    AdvantageTable { actor: PathBuf, critic: PathBuf },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::HjbSolve => "hjb-solve",
            Task::RunReinforce => "run-reinforce",
            Task::RunTd3 => "run-td3",
            Task::Evaluate { .. } => "evaluate",
            Task::IsEstimate { .. } => "is-estimate",
            Task::DumpPolicy { .. } => "dump-policy",
            Task::AdvantageTable { .. } => "advantage-table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub task: Task,
    pub config: RunConfig,
}

pub fn main_with_args<I, T>(args: I) -> anyhow::Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    run_command(cli.command)
}

/// Executes a parsed command and returns the run directory.
pub fn run_command(command: Command) -> anyhow::Result<PathBuf> {
    let (task, config) = match command {
        Command::HjbSolve(o) => (Task::HjbSolve, o.resolve()?),
        Command::RunReinforce(o) => (Task::RunReinforce, o.resolve()?),
        Command::RunTd3(o) => (Task::RunTd3, o.resolve()?),
        Command::Evaluate {
            overrides,
            policy,
            reference,
        } => {
            let Some(reference) = reference else {
                bail!(
                    "evaluate needs the reference solution: run `langevin-soc hjb-solve` first \
                     and pass --reference <run-dir>/hjb_solution.csv"
                );
            };
            let reference = reference_csv_path(&reference)?;
            (
                Task::Evaluate {
                    policy: absolute(&policy)?,
                    reference,
                },
                overrides.resolve()?,
            )
        }
        Command::IsEstimate { overrides, policies } => {
            let policies = policies.iter().map(|p| policy_spec(p)).collect::<anyhow::Result<_>>()?;
            (Task::IsEstimate { policies }, overrides.resolve()?)
        }
        Command::DumpPolicy { overrides, policy } => (
            Task::DumpPolicy {
                policy: policy_spec(&policy)?,
            },
            overrides.resolve()?,
        ),
        Command::AdvantageTable {
            overrides,
            actor,
            critic,
        } => (
            Task::AdvantageTable {
                actor: absolute(&actor)?,
                critic: absolute(&critic)?,
            },
            overrides.resolve()?,
        ),
        Command::Replay { manifest, out_dir } => {
            let text =
                fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let mut m: Manifest = toml::from_str(&text).with_context(|| format!("in {}", manifest.display()))?;
            if let Some(dir) = out_dir {
                m.config.out_dir = dir;
            }
            m.config.validate()?;
            (m.task, m.config)
        }
    };
    execute(&task, &config)
}

/// Runs `task` under `config` in a fresh run directory and returns its path.
pub fn execute(task: &Task, config: &RunConfig) -> anyhow::Result<PathBuf> {
    init_threads(config.threads);
    let dir = create_run_dir(&config.out_dir, task.name(), config.seed)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        task: task.clone(),
        config: config.clone(),
    };
    fs::write(dir.join("manifest.toml"), toml::to_string(&manifest)?)?;
    match task {
        Task::HjbSolve => hjb_solve(config, &dir)?,
        Task::RunReinforce => run_reinforce(config, &dir)?,
        Task::RunTd3 => run_td3(config, &dir)?,
        Task::Evaluate { policy, reference } => evaluate(config, policy, reference, &dir)?,
        Task::IsEstimate { policies } => estimate(config, policies, &dir)?,
        Task::DumpPolicy { policy } => dump_policy(config, policy, &dir)?,
        Task::AdvantageTable { actor, critic } => advantage(config, actor, critic, &dir)?,
    }
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}

fn init_threads(threads: usize) {
    // Fails only if the global pool already exists, e.g. on a second run in
    // the same process; the existing pool is then reused.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn create_run_dir(out_dir: &Path, name: &str, seed: u64) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = format!("{name}-seed{seed}-{stamp}");
    for i in 0.. {
        let candidate = if i == 0 {
            out_dir.join(&base)
        } else {
            out_dir.join(format!("{base}-{i}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", candidate.display())),
        }
    }
    unreachable!()
}

fn absolute(path: &Path) -> anyhow::Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("cannot open {}", path.display()))
}

fn reference_csv_path(path: &Path) -> anyhow::Result<PathBuf> {
    let file = if path.is_dir() {
        path.join("hjb_solution.csv")
    } else {
        path.to_path_buf()
    };
    if !file.is_file() {
        bail!(
            "reference solution {} not found: run `langevin-soc hjb-solve` first",
            file.display()
        );
    }
    absolute(&file)
}

/// `zero` and `hjb` pass through; anything else must be a checkpoint file.
fn policy_spec(spec: &str) -> anyhow::Result<String> {
    match spec {
        "zero" | "hjb" => Ok(spec.to_string()),
        path => Ok(absolute(Path::new(path))?.to_string_lossy().into_owned()),
    }
}

fn solve_reference(config: &RunConfig) -> anyhow::Result<HjbSolution> {
    let grid = Grid::for_env(&config.env, config.hjb.n_nodes)?;
    Ok(solve_bvp(&config.env, &grid)?)
}

fn load_params(path: &Path) -> anyhow::Result<MlpParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    MlpParams::from_text(&text).with_context(|| format!("in {}", path.display()))
}

fn load_policy(spec: &str, config: &RunConfig) -> anyhow::Result<Box<dyn Policy>> {
    Ok(match spec {
        "zero" => Box::new(ZeroPolicy),
        "hjb" => Box::new(solve_reference(config)?.policy()),
        path => {
            let p = load_params(Path::new(path))?;
            if p.input_dim() != 1 || p.output_dim() != 1 {
                bail!("{path} is not a scalar policy network (dims {:?})", p.dims());
            }
            Box::new(p)
        }
    })
}

fn policy_name(spec: &str) -> String {
    Path::new(spec)
        .file_stem()
        .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct HjbRow {
    s: f64,
    psi: f64,
    phi: f64,
    u_opt: f64,
}

fn hjb_solve(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let sol = solve_reference(config)?;
    write_csv(
        &dir.join("hjb_solution.csv"),
        sol.grid.nodes().enumerate().map(|(i, s)| HjbRow {
            s,
            psi: sol.psi[i],
            phi: sol.phi[i],
            u_opt: sol.u_opt[i],
        }),
    )?;
    let i = sol.grid.nearest(config.env.s_init);
    eprintln!("psi({}) = {:.6}", sol.grid.node(i), sol.psi[i]);
    Ok(())
}

/// Reads a reference written by `hjb-solve`.
pub fn load_reference(path: &Path) -> anyhow::Result<HjbPolicy> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut s, mut psi, mut phi, mut u) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for row in r.deserialize() {
        let row: HjbRow = row.with_context(|| format!("in {}", path.display()))?;
        s.push(row.s);
        psi.push(row.psi);
        phi.push(row.phi);
        u.push(row.u_opt);
    }
    Ok(HjbSolution::from_columns(s, psi, phi, u)?.policy())
}

#[derive(Serialize)]
struct SnapshotRow {
    checkpoint: usize,
    s: f64,
    action: f64,
    reference: f64,
}

fn snapshot_rows<'a>(
    checkpoints: &'a [(usize, MlpParams)],
    reference: &'a HjbPolicy,
    grid: &'a [f64],
) -> impl Iterator<Item = SnapshotRow> + 'a {
    checkpoints.iter().flat_map(move |&(checkpoint, ref p)| {
        grid.iter().map(move |&s| SnapshotRow {
            checkpoint,
            s,
            action: p.forward_scalar(s),
            reference: reference.action(s),
        })
    })
}

fn snapshot_grid(config: &RunConfig) -> Vec<f64> {
    linspace(config.env.state_lb, config.env.state_ub, config.eval.snapshot_points)
}

fn save_params(path: &Path, p: &MlpParams) -> anyhow::Result<()> {
    fs::write(path, p.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn run_reinforce(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let reference = solve_reference(config)?.policy();
    let rc = config.reinforce_config();
    let record = train_reinforce_with(&rc, &reference, |p, _| {
        eprintln!(
            "step {:>6}  l2 {:.4e}  return {:.4}  length {:.1}",
            p.step, p.l2_error, p.mean_return, p.mean_length
        );
    })?;
    write_csv(&dir.join("learning_curve.csv"), &record.test_points)?;

    #[derive(Serialize)]
    struct ReturnRow {
        step: usize,
        batch_mean_return: f64,
        running_mean: f64,
        truncated_count: usize,
    }
    let smooth = running_mean(&record.batch_returns, config.eval.running_window);
    write_csv(
        &dir.join("returns.csv"),
        (0..record.batch_returns.len()).map(|i| ReturnRow {
            step: i,
            batch_mean_return: record.batch_returns[i],
            running_mean: smooth[i],
            truncated_count: record.batch_truncated[i],
        }),
    )?;
    let grid = snapshot_grid(config);
    write_csv(
        &dir.join("policy_snapshots.csv"),
        snapshot_rows(&record.checkpoints, &reference, &grid),
    )?;
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    for (step, p) in &record.checkpoints {
        save_params(&ckpt.join(format!("step{step:07}.mlp")), p)?;
    }
    save_params(&dir.join("policy.mlp"), &record.final_params)
}

fn run_td3(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let reference = solve_reference(config)?.policy();
    let tc = config.td3_config();
    let record = train_td3_with(&tc, &reference, |p, _| {
        eprintln!(
            "episode {:>6}  l2 {:.4e}  return {:.4}  length {:.1}",
            p.episode, p.l2_error, p.mean_return, p.mean_length
        );
    })?;

    #[derive(Serialize)]
    struct CurveRow {
        episode: usize,
        l2_error: f64,
        #[serde(rename = "return")]
        mean_return: f64,
        length: f64,
        truncated_count: usize,
    }
    write_csv(
        &dir.join("learning_curve.csv"),
        record.test_points.iter().map(|p| CurveRow {
            episode: p.episode,
            l2_error: p.l2_error,
            mean_return: p.mean_return,
            length: p.mean_length,
            truncated_count: p.truncated_count,
        }),
    )?;

    #[derive(Serialize)]
    struct ReturnRow {
        episode: usize,
        #[serde(rename = "return")]
        episode_return: f64,
        running_mean: f64,
        length: usize,
    }
    let smooth = running_mean(&record.episode_returns, config.eval.running_window);
    write_csv(
        &dir.join("returns.csv"),
        (0..record.episode_returns.len()).map(|i| ReturnRow {
            episode: i,
            episode_return: record.episode_returns[i],
            running_mean: smooth[i],
            length: record.episode_lengths[i],
        }),
    )?;
    let grid = snapshot_grid(config);
    write_csv(
        &dir.join("policy_snapshots.csv"),
        snapshot_rows(&record.checkpoints, &reference, &grid),
    )?;
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    for (episode, p) in &record.checkpoints {
        save_params(&ckpt.join(format!("episode{episode:07}.mlp")), p)?;
    }
    let st = &record.state;
    save_params(&dir.join("actor.mlp"), &st.actor)?;
    save_params(&dir.join("critic1.mlp"), &st.critic1)?;
    save_params(&dir.join("critic2.mlp"), &st.critic2)?;
    write_advantage(config, &st.actor, &st.critic1, &dir.join("advantage.csv"))
}

fn evaluate(config: &RunConfig, policy: &Path, reference: &Path, dir: &Path) -> anyhow::Result<()> {
    let reference = load_reference(reference)?;
    let spec = policy.to_string_lossy();
    let p = load_policy(&spec, config)?;
    let key = StreamKey::new(config.seed, Purpose::Eval, 0);
    let e = evaluate_policy(p.as_ref(), &reference, &config.env, key, config.eval.k_test)?;

    #[derive(Serialize)]
    struct Row {
        policy_name: String,
        l2_error: f64,
        mean_return: f64,
        mean_length: f64,
        truncated_count: usize,
        k_test: usize,
    }
    write_csv(
        &dir.join("evaluation.csv"),
        [Row {
            policy_name: policy_name(&spec),
            l2_error: e.l2_error,
            mean_return: e.mean_return,
            mean_length: e.mean_length,
            truncated_count: e.truncated_count,
            k_test: config.eval.k_test,
        }],
    )?;
    eprintln!("l2 {:.4e}  return {:.4}  length {:.1}", e.l2_error, e.mean_return, e.mean_length);
    Ok(())
}

fn estimate(config: &RunConfig, policies: &[String], dir: &Path) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Row {
        policy_name: String,
        mean: f64,
        sample_variance: f64,
        relative_error: f64,
        mean_hitting_time: f64,
        k: usize,
        truncated_count: usize,
    }
    let mut rows = Vec::new();
    // every policy is driven by the same noise
    let key = StreamKey::new(config.seed, Purpose::Estimate, 0);
    for spec in policies {
        let p = load_policy(spec, config)?;
        let e = is_estimate(p.as_ref(), &config.env, key, config.eval.k_estimate)?;
        eprintln!(
            "{:>8}: mean {:.6}  relative error {:.4}  hitting time {:.3}",
            policy_name(spec),
            e.mean,
            e.relative_error,
            e.mean_hitting_time
        );
        rows.push(Row {
            policy_name: policy_name(spec),
            mean: e.mean,
            sample_variance: e.sample_variance,
            relative_error: e.relative_error,
            mean_hitting_time: e.mean_hitting_time,
            k: e.k,
            truncated_count: e.truncated_count,
        });
    }
    write_csv(&dir.join("is_estimates.csv"), rows)
}

fn dump_policy(config: &RunConfig, spec: &str, dir: &Path) -> anyhow::Result<()> {
    let p = load_policy(spec, config)?;
    let reference = solve_reference(config)?.policy();

    #[derive(Serialize)]
    struct PolicyRow {
        s: f64,
        action: f64,
        reference: f64,
    }
    write_csv(
        &dir.join("policy.csv"),
        snapshot_grid(config).into_iter().map(|s| PolicyRow {
            s,
            action: p.action(s),
            reference: reference.action(s),
        }),
    )?;

    #[derive(Serialize)]
    struct TrajectoryRow {
        step: usize,
        time: f64,
        state: f64,
        action: f64,
        reward: f64,
    }
    let key = StreamKey::new(config.seed, Purpose::Diagnostic, 0);
    let traj = sample_trajectory(p.as_ref(), &config.env, &mut key.noise(0));
    let dt = config.env.dt;
    let mut rows: Vec<TrajectoryRow> = traj
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| TrajectoryRow {
            step: i,
            time: i as f64 * dt,
            state: t.state,
            action: t.action,
            reward: t.reward,
        })
        .collect();
    if let Some(s) = traj.final_state() {
        let n = traj.hitting_steps();
        rows.push(TrajectoryRow {
            step: n,
            time: n as f64 * dt,
            state: s,
            action: p.action(s),
            reward: 0.0,
        });
    }
    write_csv(&dir.join("trajectory.csv"), rows)
}

fn write_advantage(config: &RunConfig, actor: &MlpParams, critic: &MlpParams, path: &Path) -> anyhow::Result<()> {
    let states = linspace(-2.0, 2.0, config.eval.advantage_states);
    let actions = linspace(config.td3.action_low, config.td3.action_high, config.eval.advantage_actions);
    let rows = advantage_table(|s, a| critic.forward_pair(s, a), actor, &states, &actions);
    write_csv(path, rows)
}

fn advantage(config: &RunConfig, actor: &Path, critic: &Path, dir: &Path) -> anyhow::Result<()> {
    let actor = load_params(actor)?;
    let critic = load_params(critic)?;
    if actor.dims().first() != Some(&1) || critic.dims().first() != Some(&2) {
        bail!("expected a 1-input actor and a 2-input critic");
    }
    write_advantage(config, &actor, &critic, &dir.join("advantage.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_valid_ones() {
        let err = RunConfig::from_toml("[env]\nbeta = 4.0\ntemperature = 3.0\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("temperature"), "{msg}");
        assert!(msg.contains("beta"), "{msg}");
        assert!(RunConfig::from_toml("nonsense = 1\n").is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let mut config = RunConfig::default();
        config.env.beta = 4.0;
        config.td3.sigma_expl = 0.5;
        config.td3.stop_at_l2 = Some(0.05);
        config.reinforce.learning_rate = 0.1 + 0.2;
        let m = Manifest {
            version: "x".into(),
            task: Task::IsEstimate {
                policies: vec!["zero".into(), "hjb".into()],
            },
            config,
        };
        let back: Manifest = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn flags_override_the_file() {
        let o = Overrides {
            beta: Some(4.0),
            sigma_expl: Some(0.5),
            sigma_target: Some(0.1),
            episodes: Some(7),
            ..Overrides::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!(c.env.beta, 4.0);
        assert_eq!((c.td3.sigma_expl, c.td3.sigma_target, c.td3.n_episodes), (0.5, 0.1, 7));
        assert_eq!(c.td3_config().env.beta, 4.0);
    }

    #[test]
    fn evaluate_without_reference_explains_what_to_do() {
        let err = run_command(Command::Evaluate {
            overrides: Overrides::default(),
            policy: PathBuf::from("whatever.mlp"),
            reference: None,
        })
        .unwrap_err();
        assert!(err.to_string().contains("hjb-solve"));
    }
}
