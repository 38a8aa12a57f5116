//! The distributed actor-critic and its centralized baseline.
//!
//! Every agent owns one task. Per learning step each agent
//!
//! 1. collects `episodes_per_step` episodes with its current (frozen) policy,
//! 2. computes Monte Carlo returns `y_t` and advantages `A_t = y_t - v(s_t)`,
//! 3. adapts its critic along `(1/|M|) sum_t A_t grad v(s_t)` and its actor
//!    along `(1/|M|) sum_t A_t grad log pi(a_t|s_t)` (plus the entropy term),
//! 4. waits at a barrier, then replaces both parameter vectors by the convex
//!    combination of its neighbors' intermediate parameters with weights
//!    `c_{lk}` from column `k` of the combination matrix.
//!
//! Agents own their RNG streams, so results do not depend on how many
//! worker threads run the adaptation phase. Optimizer state is local and
//! never exchanged.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, FamilyKind, ObsEncoding, TaskParams};
use crate::error::{Error, Result};
use crate::net::CombinationMatrix;
use crate::nn::{Activation, AdamState, EntropyMode, GaussianPolicyHead, MlpParams, Optimizer};
use crate::seeded_rng;
use crate::stats::{mean, Quartiles};

const STREAM_INIT: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_EVAL_AVERAGE: u64 = 4;

/// Tolerance on `sum_l c_{lk} = 1` when combining.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// One stored transition `(s_t, a_t, r_{t+1}, s_{t+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// A single episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// True when the episode ended in a terminal state (failure or horizon).
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Discounted returns `y_t = r_{t+1} + gamma y_{t+1}` with `y = 0` after
/// the last step.
pub fn mc_returns(trajectory: &Trajectory, gamma: f64) -> Vec<f64> {
    discounted_returns(&trajectory.rewards(), gamma)
}

pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// The samples `M_k` of one learning step, flattened over episodes.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// `n x obs_dim`.
    pub states: Array2<f64>,
    pub actions: Vec<f64>,
    pub returns: Vec<f64>,
}

impl SampleBatch {
    pub fn from_trajectories(trajectories: &[Trajectory], gamma: f64, obs_dim: usize) -> Result<Self> {
        let n: usize = trajectories.iter().map(Trajectory::len).sum();
        let mut states = Array2::zeros((n, obs_dim));
        let mut actions = Vec::with_capacity(n);
        let mut returns = Vec::with_capacity(n);
        let mut row = 0;
        for traj in trajectories {
            returns.extend(mc_returns(traj, gamma));
            for step in &traj.steps {
                if step.state.len() != obs_dim {
                    return Err(Error::Shape(format!(
                        "state has {} entries, expected {obs_dim}",
                        step.state.len()
                    )));
                }
                states.row_mut(row).assign(&ndarray::ArrayView1::from(&step.state[..]));
                actions.push(step.action);
                row += 1;
            }
        }
        Ok(Self {
            states,
            actions,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Critic values `v(s_t)` for every sample.
pub fn critic_values(critic: &MlpParams, states: ndarray::ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(critic.forward_batch(states)?.output().column(0).to_vec())
}

/// `A_t = y_t - v(s_t)`.
pub fn advantage_estimates(batch: &SampleBatch, critic: &MlpParams) -> Result<Vec<f64>> {
    let values = critic_values(critic, batch.states.view())?;
    Ok(batch.returns.iter().zip(&values).map(|(y, v)| y - v).collect())
}

/// Monte Carlo regression loss `(1 / 2n) sum_t (v(s_t) - y_t)^2`.
pub fn critic_loss(critic: &MlpParams, batch: &SampleBatch) -> Result<f64> {
    let values = critic_values(critic, batch.states.view())?;
    let n = batch.len().max(1) as f64;
    Ok(values
        .iter()
        .zip(&batch.returns)
        .map(|(v, y)| 0.5 * (v - y) * (v - y))
        .sum::<f64>()
        / n)
}

/// Gradient of [`critic_loss`] given advantages computed with the same
/// critic: `-(1/n) sum_t A_t grad v(s_t)`.
pub fn critic_loss_gradient(critic: &MlpParams, batch: &SampleBatch, advantages: &[f64]) -> Result<MlpParams> {
    if advantages.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} advantages for {} samples",
            advantages.len(),
            batch.len()
        )));
    }
    let n = batch.len().max(1) as f64;
    let cache = critic.forward_batch(batch.states.view())?;
    let upstream = Array2::from_shape_fn((batch.len(), 1), |(t, _)| -advantages[t] / n);
    critic.backward_batch(&cache, upstream.view())
}

/// Multitask critic costs at shared states.
///
/// `targets[k][t]` is task `k`'s return target at state `t`. Returns
/// `(J, J_tilde)` where `J` regresses `v` on the task-averaged target and
/// `J_tilde` averages the per-task regression costs; `J_tilde >= J`.
pub fn multitask_critic_costs(values: &[f64], targets: &[Vec<f64>]) -> Result<(f64, f64)> {
    if targets.is_empty() || targets.iter().any(|y| y.len() != values.len()) {
        return Err(Error::Shape(format!(
            "{} target rows for {} values",
            targets.len(),
            values.len()
        )));
    }
    let n = targets.len() as f64;
    let steps = values.len().max(1) as f64;
    let (mut j, mut j_tilde) = (0.0, 0.0);
    for (t, v) in values.iter().enumerate() {
        let mean_residual = targets.iter().map(|y| v - y[t]).sum::<f64>() / n;
        let mean_square = targets.iter().map(|y| (v - y[t]) * (v - y[t])).sum::<f64>() / n;
        j += 0.5 * mean_residual * mean_residual;
        j_tilde += 0.5 * mean_square;
    }
    Ok((j / steps, j_tilde / steps))
}

/// Per-sample regression gradient `(v(s) - y) grad v(s)`.
pub fn critic_sample_gradient(critic: &MlpParams, state: &[f64], target: f64) -> Result<MlpParams> {
    let value = critic.forward(state)?[0];
    let mut grad = critic.backward(state, &[1.0])?;
    grad.scale(value - target);
    Ok(grad)
}

/// Actor objective `(1/n) sum_t [A_t log pi(a_t|s_t) + c sign H(s_t)]`.
pub fn actor_objective(
    actor: &GaussianPolicyHead,
    batch: &SampleBatch,
    advantages: &[f64],
    entropy_coeff: f64,
    entropy_mode: EntropyMode,
) -> Result<f64> {
    let n = batch.len().max(1) as f64;
    let mut total = 0.0;
    for (t, row) in batch.states.outer_iter().enumerate() {
        let s = row.to_vec();
        total += advantages[t] * actor.log_prob(&s, batch.actions[t])?
            + entropy_coeff * entropy_mode.ascent_sign() * actor.entropy(&s)?;
    }
    Ok(total / n)
}

/// Gradient of the negated [`actor_objective`] (a loss to descend).
pub fn actor_loss_gradient(
    actor: &GaussianPolicyHead,
    batch: &SampleBatch,
    advantages: &[f64],
    entropy_coeff: f64,
    entropy_mode: EntropyMode,
) -> Result<MlpParams> {
    if advantages.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} advantages for {} samples",
            advantages.len(),
            batch.len()
        )));
    }
    let n = batch.len().max(1) as f64;
    let weights: Vec<f64> = advantages.iter().map(|a| -a / n).collect();
    actor.weighted_score_grad(
        batch.states.view(),
        &batch.actions,
        &weights,
        -entropy_coeff / n,
        entropy_mode,
    )
}

/// Convex combination `sum_l c_l params_l`, elementwise.
pub fn combine(params: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} parameter vectors for {} weights",
            params.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Invariant(format!("combination weights sum to {total}")));
    }
    let len = params[0].len();
    if params.iter().any(|p| p.len() != len) {
        return Err(Error::Shape("parameter vectors differ in length".into()));
    }
    let mut out: Vec<f64> = params[0].iter().map(|x| weights[0] * x).collect();
    for (p, w) in params.iter().zip(weights).skip(1) {
        for (o, x) in out.iter_mut().zip(p.iter()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Learning-rate sequence `initial / (1 + decay * i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay: f64,
}

impl RateSchedule {
    pub const fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            decay: 0.0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.initial / (1.0 + self.decay * step as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    fn build(self, len: usize) -> Optimizer {
        match self {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(len)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }
}

/// Run-level settings shared by Diff-DAC and Cent-AC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Episodes per agent (per task for Cent-AC).
    pub max_episodes: usize,
    /// Episode cap `T`.
    pub max_steps: usize,
    pub critic_rate: RateSchedule,
    pub actor_rate: RateSchedule,
    pub episodes_per_step: usize,
    pub discount: f64,
    pub entropy_coeff: f64,
    pub entropy_mode: EntropyMode,
    pub optimizer: OptimizerKind,
    /// Recompute actor advantages with the freshly combined critic.
    pub gauss_seidel: bool,
    /// Evaluate every this many episodes per agent.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Also evaluate the network-average policy on every task.
    pub eval_network_average: bool,
    pub hidden: Vec<usize>,
    pub var_floor: f64,
    pub obs_encoding: ObsEncoding,
    pub seed: u64,
    /// Stop after the first evaluation whose median agent return reaches this.
    pub target_return: Option<f64>,
    /// Write checkpoints at every n-th evaluation point (0: final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_episodes: 3000,
            max_steps: 200,
            critic_rate: RateSchedule::constant(0.01),
            actor_rate: RateSchedule::constant(0.001),
            episodes_per_step: 5,
            discount: 0.99,
            entropy_coeff: 0.0005,
            entropy_mode: EntropyMode::Bonus,
            optimizer: OptimizerKind::Adam,
            gauss_seidel: false,
            eval_every: 20,
            eval_episodes: 10,
            eval_network_average: true,
            hidden: vec![400, 400],
            var_floor: 1e-6,
            obs_encoding: ObsEncoding::SinCos,
            seed: 0,
            target_return: None,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(format!("run.{k}"), m));
        if self.max_episodes == 0 {
            return err("max_episodes", "must be > 0".into());
        }
        if self.max_steps == 0 {
            return err("max_steps", "must be > 0".into());
        }
        if self.episodes_per_step == 0 {
            return err("episodes_per_step", "must be > 0".into());
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return err("eval_every", "evaluation cadence and episode count must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return err("discount", format!("{} outside [0, 1)", self.discount));
        }
        for (key, r) in [("critic_rate", self.critic_rate), ("actor_rate", self.actor_rate)] {
            if !(r.initial >= 0.0) || !(r.decay >= 0.0) || !r.initial.is_finite() {
                return err(key, format!("{r:?} must be finite and nonnegative"));
            }
        }
        // initial_b <= initial_a and decay_b >= decay_a give b_i <= a_i for all i.
        if self.actor_rate.initial > self.critic_rate.initial || self.actor_rate.decay < self.critic_rate.decay {
            return err(
                "actor_rate",
                format!(
                    "actor rate {:?} may exceed critic rate {:?}",
                    self.actor_rate, self.critic_rate
                ),
            );
        }
        if !(self.entropy_coeff >= 0.0) {
            return err("entropy_coeff", "must be >= 0".into());
        }
        if !(self.var_floor > 0.0) {
            return err("var_floor", "must be > 0".into());
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return err("hidden", "layer sizes must be > 0".into());
        }
        Ok(())
    }
}

/// A task an agent (or the central learner) interacts with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: FamilyKind,
    pub params: TaskParams,
}

impl TaskSpec {
    pub fn build(&self, config: &RunConfig) -> Result<Env> {
        Ok(Env::new(self.kind, self.params)?
            .with_encoding(config.obs_encoding)
            .with_horizon(config.max_steps))
    }
}

/// One networked learner.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub task: TaskSpec,
    pub env: Env,
    pub critic: MlpParams,
    pub actor: GaussianPolicyHead,
    critic_opt: Optimizer,
    actor_opt: Optimizer,
    /// `(l, c_{lk})` for every neighbor `l` (self included).
    pub neighbors: Vec<(usize, f64)>,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
}

impl Agent {
    /// Fresh networks from the `(seed, init, id)` stream.
    pub fn new(id: usize, task: TaskSpec, neighbors: Vec<(usize, f64)>, config: &RunConfig) -> Result<Self> {
        let env = task.build(config)?;
        let (critic, actor) = init_networks(env.obs_dim(), env.action_bound(), config, id)?;
        let total: f64 = neighbors.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invariant(format!("agent {id} neighbor weights sum to {total}")));
        }
        Ok(Self {
            id,
            task,
            env,
            critic_opt: config.optimizer.build(critic.len()),
            actor_opt: config.optimizer.build(actor.backbone.len()),
            critic,
            actor,
            neighbors,
            rng: seeded_rng(config.seed, &[STREAM_ROLLOUT, id as u64]),
            eval_rng: seeded_rng(config.seed, &[STREAM_EVAL, id as u64]),
        })
    }

    /// Runs one episode with actions sampled from the current policy.
    pub fn rollout(&mut self, max_steps: usize) -> Result<Trajectory> {
        rollout_with(&self.actor, &mut self.env, &mut self.rng, max_steps)
    }

    /// Adapted critic `xi_hat` from advantages computed with the current critic.
    pub fn critic_adapt(&mut self, batch: &SampleBatch, advantages: &[f64], rate: f64) -> Result<MlpParams> {
        let grad = critic_loss_gradient(&self.critic, batch, advantages)?;
        if !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "critic gradient is not finite (max |A| = {})",
                max_abs(advantages)
            )));
        }
        let mut next = self.critic.clone();
        self.critic_opt.descend(&mut next, &grad, rate)?;
        Ok(next)
    }

    /// Adapted actor `w_hat`; advantages are treated as constants.
    pub fn actor_adapt(
        &mut self,
        batch: &SampleBatch,
        advantages: &[f64],
        rate: f64,
        entropy_coeff: f64,
        entropy_mode: EntropyMode,
    ) -> Result<GaussianPolicyHead> {
        let grad = actor_loss_gradient(&self.actor, batch, advantages, entropy_coeff, entropy_mode)?;
        if !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "actor gradient is not finite (max |A| = {})",
                max_abs(advantages)
            )));
        }
        let mut next = self.actor.clone();
        self.actor_opt.descend(&mut next.backbone, &grad, rate)?;
        Ok(next)
    }

    /// Critic and actor parameters concatenated.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.critic.to_flat();
        v.extend_from_slice(self.actor.backbone.as_flat());
        v
    }
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn init_networks(obs_dim: usize, action_bound: f64, config: &RunConfig, id: usize) -> Result<(MlpParams, GaussianPolicyHead)> {
    let mut rng = seeded_rng(config.seed, &[STREAM_INIT, id as u64]);
    let critic = MlpParams::init(obs_dim, &config.hidden, 1, Activation::Relu, Activation::Linear, &mut rng)?;
    let actor = GaussianPolicyHead::init(obs_dim, &config.hidden, action_bound, config.var_floor, &mut rng)?;
    Ok((critic, actor))
}

/// One episode of `actor` in `env`. Stops at a terminal state or after
/// `max_steps` steps.
pub fn rollout_with<R: Rng + ?Sized>(
    actor: &GaussianPolicyHead,
    env: &mut Env,
    rng: &mut R,
    max_steps: usize,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    if max_steps == 0 {
        return Ok(traj);
    }
    let mut state = env.reset(rng);
    for _ in 0..max_steps {
        let action = actor.sample(&state, rng)?;
        let out = env.step(action)?;
        traj.steps.push(Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.observation.clone(),
        });
        state = out.observation;
        if out.terminal {
            traj.terminal = true;
            break;
        }
    }
    Ok(traj)
}

/// Mean undiscounted return of one task under the greedy (mean) action.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReturns {
    pub task_id: usize,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub quartiles: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_task: Vec<TaskReturns>,
    /// Quartiles of the per-task mean returns.
    pub aggregate: Quartiles,
    pub mean: f64,
}

/// Runs `n_episodes` deterministic-action episodes per task.
pub fn evaluate<R: Rng + ?Sized>(
    actor: &GaussianPolicyHead,
    tasks: &[Env],
    n_episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Argument("n_episodes must be >= 1".into()));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for env in tasks {
        let mut env = env.clone();
        let returns = (0..n_episodes)
            .map(|_| greedy_episode(actor, &mut env, rng))
            .collect::<Result<Vec<_>>>()?;
        per_task.push(TaskReturns {
            task_id: env.params().task_id,
            mean: mean(&returns),
            quartiles: Quartiles::of(&returns),
            returns,
        });
    }
    let means: Vec<f64> = per_task.iter().map(|t| t.mean).collect();
    Ok(EvalReport {
        aggregate: Quartiles::of(&means),
        mean: mean(&means),
        per_task,
    })
}

fn greedy_episode<R: Rng + ?Sized>(actor: &GaussianPolicyHead, env: &mut Env, rng: &mut R) -> Result<f64> {
    let mut state = env.reset(rng);
    let mut total = 0.0;
    loop {
        let (action, _) = actor.mean_var(&state)?;
        let out = env.step(action)?;
        total += out.reward;
        if out.terminal {
            return Ok(total);
        }
        state = out.observation;
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub episodes_per_agent: usize,
    /// Agent index, or `mean` for the network-average policy.
    pub agent_id: String,
    pub task_id: usize,
    pub return_mean: f64,
    pub return_median: f64,
    pub return_q1: f64,
    pub return_q3: f64,
    pub param_disagreement: f64,
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "episodes_per_agent",
    "agent_id",
    "task_id",
    "return_mean",
    "return_median",
    "return_q1",
    "return_q3",
    "param_disagreement",
];

pub const AVERAGE_AGENT_ID: &str = "mean";

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if headers != METRICS_HEADER {
        return Err(Error::Parse(format!(
            "{}: header {headers:?} does not match the metrics schema",
            path.as_ref().display()
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

/// Per-evaluation-point summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub epoch: usize,
    pub episodes_per_agent: usize,
    /// Mean greedy return of each agent on its own task.
    pub agent_returns: Vec<f64>,
    pub param_disagreement: f64,
}

impl EvalPoint {
    pub fn median_agent_return(&self) -> f64 {
        Quartiles::of(&self.agent_returns).median
    }
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalPoint>,
    /// Final per-agent (or single central) critics and actors.
    pub critics: Vec<MlpParams>,
    pub actors: Vec<GaussianPolicyHead>,
    pub episodes_per_agent: usize,
    pub epochs: usize,
    /// Episodes per agent at the evaluation that first met `target_return`.
    pub reached_target_at: Option<usize>,
}

/// Where and how often a run writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    pub fn none() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn write(&self, label: &str, critics: &[&MlpParams], actors: &[&GaussianPolicyHead]) -> Result<Option<PathBuf>> {
        let Some(root) = &self.dir else { return Ok(None) };
        let dir = root.join("checkpoints").join(label);
        std::fs::create_dir_all(&dir)?;
        for (k, (c, a)) in critics.iter().zip(actors).enumerate() {
            std::fs::write(dir.join(format!("agent{k:03}_critic.txt")), c.to_checkpoint())?;
            std::fs::write(dir.join(format!("agent{k:03}_actor.txt")), a.to_checkpoint())?;
        }
        Ok(Some(dir))
    }
}

/// Max over agents of the sup-norm distance to the mean parameter vector.
pub fn param_disagreement(flats: &[Vec<f64>]) -> f64 {
    if flats.is_empty() {
        return 0.0;
    }
    let n = flats.len() as f64;
    let len = flats[0].len();
    let mut avg = vec![0.0; len];
    for f in flats {
        for (a, x) in avg.iter_mut().zip(f) {
            *a += x;
        }
    }
    for a in &mut avg {
        *a /= n;
    }
    flats
        .iter()
        .map(|f| f.iter().zip(&avg).fold(0.0f64, |m, (x, a)| m.max((x - a).abs())))
        .fold(0.0f64, f64::max)
}

fn mean_flat(vectors: &[&[f64]]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let mut avg = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (a, x) in avg.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

struct AgentStep {
    critic: MlpParams,
    actor: Option<GaussianPolicyHead>,
    batch: SampleBatch,
}

fn with_context<T>(agent: usize, episode: usize, step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Agent {
        agent,
        episode,
        step,
        source: Box::new(e),
    })
}

/// Runs the distributed actor-critic.
///
/// `tasks[k]` is the task of agent `k`; `combination` must be `N x N`.
pub fn diffdac_run(
    config: &RunConfig,
    combination: &CombinationMatrix,
    tasks: &[TaskSpec],
    sink: &CheckpointSink,
) -> Result<RunArtifacts> {
    config.validate()?;
    let n = tasks.len();
    if n == 0 || combination.n_agents() != n {
        return Err(Error::Argument(format!(
            "{} tasks for a {}-agent combination matrix",
            n,
            combination.n_agents()
        )));
    }
    let mut agents = (0..n)
        .map(|k| Agent::new(k, tasks[k], combination.column_weights(k), config))
        .collect::<Result<Vec<_>>>()?;

    let eval_envs: Vec<Env> = unique_tasks(tasks)
        .iter()
        .map(|t| t.build(config))
        .collect::<Result<_>>()?;
    let mut avg_eval_rng = seeded_rng(config.seed, &[STREAM_EVAL_AVERAGE]);

    let mut art = RunArtifacts {
        metrics: Vec::new(),
        evals: Vec::new(),
        critics: Vec::new(),
        actors: Vec::new(),
        episodes_per_agent: 0,
        epochs: 0,
        reached_target_at: None,
    };
    let mut evaluations = 0usize;
    let mut record = |agents: &mut [Agent], art: &mut RunArtifacts, epoch: usize, episodes: usize| -> Result<bool> {
        let flats: Vec<Vec<f64>> = agents.iter().map(Agent::flat_params).collect();
        let disagreement = param_disagreement(&flats);
        let reports = agents
            .par_iter_mut()
            .map(|a| {
                let env = [a.env.clone()];
                evaluate(&a.actor, &env, config.eval_episodes, &mut a.eval_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut agent_returns = Vec::with_capacity(n);
        for (a, report) in agents.iter().zip(&reports) {
            let t = &report.per_task[0];
            agent_returns.push(t.mean);
            art.metrics.push(metrics_row(epoch, episodes, a.id.to_string(), t, disagreement));
        }
        if config.eval_network_average {
            let backbones: Vec<&[f64]> = agents.iter().map(|a| a.actor.backbone.as_flat()).collect();
            let mut avg_actor = agents[0].actor.clone();
            avg_actor.backbone.set_flat(&mean_flat(&backbones))?;
            let report = evaluate(&avg_actor, &eval_envs, config.eval_episodes, &mut avg_eval_rng)?;
            for t in &report.per_task {
                art.metrics.push(metrics_row(epoch, episodes, AVERAGE_AGENT_ID.into(), t, disagreement));
            }
        }
        let point = EvalPoint {
            epoch,
            episodes_per_agent: episodes,
            agent_returns,
            param_disagreement: disagreement,
        };
        let reached = config
            .target_return
            .is_some_and(|target| point.median_agent_return() >= target);
        art.evals.push(point);
        evaluations += 1;
        if config.checkpoint_every > 0 && evaluations % config.checkpoint_every == 0 {
            let critics: Vec<&MlpParams> = agents.iter().map(|a| &a.critic).collect();
            let actors: Vec<&GaussianPolicyHead> = agents.iter().map(|a| &a.actor).collect();
            sink.write(&format!("ep{episodes:06}"), &critics, &actors)?;
        }
        Ok(reached)
    };

    let mut episodes = 0usize;
    let mut epoch = 0usize;
    let mut reached = record(&mut agents, &mut art, epoch, episodes)?;
    if reached {
        art.reached_target_at = Some(0);
    }
    while episodes < config.max_episodes && !reached {
        let chunk = config.episodes_per_step.min(config.max_episodes - episodes);
        let alpha = config.critic_rate.at(epoch);
        let beta = config.actor_rate.at(epoch);
        let step_result = diffdac_epoch(&mut agents, config, chunk, alpha, beta, episodes);
        if let Err(e) = step_result {
            let critics: Vec<&MlpParams> = agents.iter().map(|a| &a.critic).collect();
            let actors: Vec<&GaussianPolicyHead> = agents.iter().map(|a| &a.actor).collect();
            if let Some(dir) = sink.write(&format!("abort_ep{episodes:06}"), &critics, &actors)? {
                return Err(Error::Aborted {
                    checkpoint: dir,
                    source: Box::new(e),
                });
            }
            return Err(e);
        }
        episodes += chunk;
        epoch += 1;
        let crossed = episodes / config.eval_every > (episodes - chunk) / config.eval_every;
        if crossed || episodes == config.max_episodes {
            reached = record(&mut agents, &mut art, epoch, episodes)?;
            if reached {
                art.reached_target_at = Some(episodes);
            }
        }
    }

    let critics: Vec<&MlpParams> = agents.iter().map(|a| &a.critic).collect();
    let actors: Vec<&GaussianPolicyHead> = agents.iter().map(|a| &a.actor).collect();
    sink.write("final", &critics, &actors)?;
    art.episodes_per_agent = episodes;
    art.epochs = epoch;
    art.critics = agents.iter().map(|a| a.critic.clone()).collect();
    art.actors = agents.into_iter().map(|a| a.actor).collect();
    Ok(art)
}

fn metrics_row(epoch: usize, episodes: usize, agent_id: String, t: &TaskReturns, disagreement: f64) -> MetricsRow {
    MetricsRow {
        epoch,
        episodes_per_agent: episodes,
        agent_id,
        task_id: t.task_id,
        return_mean: t.mean,
        return_median: t.quartiles.median,
        return_q1: t.quartiles.q1,
        return_q3: t.quartiles.q3,
        param_disagreement: disagreement,
    }
}

fn unique_tasks(tasks: &[TaskSpec]) -> Vec<TaskSpec> {
    let mut out: Vec<TaskSpec> = Vec::new();
    for t in tasks {
        if !out.iter().any(|u| u.params.task_id == t.params.task_id && u.kind == t.kind) {
            out.push(*t);
        }
    }
    out.sort_by_key(|t| t.params.task_id);
    out
}

/// One learning step of every agent followed by the combination barrier.
fn diffdac_epoch(
    agents: &mut [Agent],
    config: &RunConfig,
    episodes: usize,
    alpha: f64,
    beta: f64,
    episodes_done: usize,
) -> Result<()> {
    // Adaptation: rollouts with the frozen policy, then local gradient steps.
    let steps = agents
        .par_iter_mut()
        .map(|agent| {
            let mut trajectories = Vec::with_capacity(episodes);
            for e in 0..episodes {
                let traj = agent.rollout(config.max_steps);
                let traj = with_context(agent.id, episodes_done + e, agent.env.elapsed(), traj)?;
                trajectories.push(traj);
            }
            let at = episodes_done + episodes;
            let batch = with_context(agent.id, at, 0, SampleBatch::from_trajectories(&trajectories, config.discount, agent.env.obs_dim()))?;
            let adv = with_context(agent.id, at, 0, advantage_estimates(&batch, &agent.critic))?;
            let critic = with_context(agent.id, at, 0, agent.critic_adapt(&batch, &adv, alpha))?;
            let actor = if config.gauss_seidel {
                None
            } else {
                Some(with_context(agent.id, at, 0, agent.actor_adapt(&batch, &adv, beta, config.entropy_coeff, config.entropy_mode))?)
            };
            Ok(AgentStep { critic, actor, batch })
        })
        .collect::<Result<Vec<_>>>()?;

    // Barrier, then combination over immutable snapshots.
    let critic_snapshot: Vec<&[f64]> = steps.iter().map(|s| s.critic.as_flat()).collect();
    let new_critics = combine_all(agents, &critic_snapshot)?;
    for (agent, flat) in agents.iter_mut().zip(&new_critics) {
        agent.critic.set_flat(flat)?;
    }

    let actors: Vec<GaussianPolicyHead> = if config.gauss_seidel {
        agents
            .par_iter_mut()
            .zip(steps.par_iter())
            .map(|(agent, step)| {
                let at = episodes_done + episodes;
                let adv = with_context(agent.id, at, 0, advantage_estimates(&step.batch, &agent.critic))?;
                with_context(agent.id, at, 0, agent.actor_adapt(&step.batch, &adv, beta, config.entropy_coeff, config.entropy_mode))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        steps.into_iter().map(|s| s.actor.expect("Jacobi step adapts the actor")).collect()
    };
    let actor_snapshot: Vec<&[f64]> = actors.iter().map(|a| a.backbone.as_flat()).collect();
    let new_actors = combine_all(agents, &actor_snapshot)?;
    for (agent, flat) in agents.iter_mut().zip(&new_actors) {
        agent.actor.backbone.set_flat(flat)?;
    }
    Ok(())
}

fn combine_all(agents: &[Agent], snapshot: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    agents
        .par_iter()
        .map(|agent| {
            let params: Vec<&[f64]> = agent.neighbors.iter().map(|(l, _)| snapshot[*l]).collect();
            let weights: Vec<f64> = agent.neighbors.iter().map(|(_, w)| *w).collect();
            combine(&params, &weights)
        })
        .collect()
}

/// Centralized baseline: one critic/actor pair trained on every task.
///
/// Per learning step it collects `episodes_per_step` episodes from each task
/// (with that task's RNG stream), computes each task's normalized gradient
/// and takes a single optimizer step along the average over tasks.
pub fn cent_ac_run(config: &RunConfig, tasks: &[TaskSpec], sink: &CheckpointSink) -> Result<RunArtifacts> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Argument("Cent-AC needs at least one task".into()));
    }
    let mut envs: Vec<Env> = tasks.iter().map(|t| t.build(config)).collect::<Result<_>>()?;
    let obs_dim = envs[0].obs_dim();
    if envs.iter().any(|e| e.obs_dim() != obs_dim) {
        return Err(Error::Argument("tasks disagree on observation size".into()));
    }
    let (mut critic, mut actor) = init_networks(obs_dim, envs[0].action_bound(), config, 0)?;
    let mut critic_opt = config.optimizer.build(critic.len());
    let mut actor_opt = config.optimizer.build(actor.backbone.len());
    let mut rngs: Vec<ChaCha8Rng> = (0..tasks.len())
        .map(|k| seeded_rng(config.seed, &[STREAM_ROLLOUT, k as u64]))
        .collect();
    let mut eval_rngs: Vec<ChaCha8Rng> = (0..tasks.len())
        .map(|k| seeded_rng(config.seed, &[STREAM_EVAL, k as u64]))
        .collect();

    let mut art = RunArtifacts {
        metrics: Vec::new(),
        evals: Vec::new(),
        critics: Vec::new(),
        actors: Vec::new(),
        episodes_per_agent: 0,
        epochs: 0,
        reached_target_at: None,
    };
    let mut evaluations = 0usize;
    let mut record = |actor: &GaussianPolicyHead,
                      critic: &MlpParams,
                      envs: &[Env],
                      rngs: &mut [ChaCha8Rng],
                      art: &mut RunArtifacts,
                      epoch: usize,
                      episodes: usize|
     -> Result<bool> {
        let mut task_means = Vec::with_capacity(envs.len());
        for (env, rng) in envs.iter().zip(rngs.iter_mut()) {
            let report = evaluate(actor, std::slice::from_ref(env), config.eval_episodes, rng)?;
            let t = &report.per_task[0];
            task_means.push(t.mean);
            art.metrics.push(metrics_row(epoch, episodes, "0".into(), t, 0.0));
        }
        let point = EvalPoint {
            epoch,
            episodes_per_agent: episodes,
            agent_returns: task_means,
            param_disagreement: 0.0,
        };
        let reached = config
            .target_return
            .is_some_and(|target| point.median_agent_return() >= target);
        art.evals.push(point);
        evaluations += 1;
        if config.checkpoint_every > 0 && evaluations % config.checkpoint_every == 0 {
            sink.write(&format!("ep{episodes:06}"), &[critic], &[actor])?;
        }
        Ok(reached)
    };

    let mut episodes = 0usize;
    let mut epoch = 0usize;
    let mut reached = record(&actor, &critic, &envs, &mut eval_rngs, &mut art, 0, 0)?;
    if reached {
        art.reached_target_at = Some(0);
    }
    while episodes < config.max_episodes && !reached {
        let chunk = config.episodes_per_step.min(config.max_episodes - episodes);
        let alpha = config.critic_rate.at(epoch);
        let beta = config.actor_rate.at(epoch);
        let result = (|| -> Result<()> {
            let mut critic_grad = critic.zeros_like();
            let mut actor_grad = actor.backbone.zeros_like();
            for (k, (env, rng)) in envs.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let mut trajectories = Vec::with_capacity(chunk);
                for e in 0..chunk {
                    let traj = rollout_with(&actor, env, rng, config.max_steps);
                    trajectories.push(with_context(k, episodes + e, env.elapsed(), traj)?);
                }
                let at = episodes + chunk;
                let batch = with_context(k, at, 0, SampleBatch::from_trajectories(&trajectories, config.discount, obs_dim))?;
                let adv = with_context(k, at, 0, advantage_estimates(&batch, &critic))?;
                let gc = with_context(k, at, 0, critic_loss_gradient(&critic, &batch, &adv))?;
                let ga = with_context(k, at, 0, actor_loss_gradient(&actor, &batch, &adv, config.entropy_coeff, config.entropy_mode))?;
                if k == 0 {
                    critic_grad = gc;
                    actor_grad = ga;
                } else {
                    critic_grad.add_scaled(1.0, &gc)?;
                    actor_grad.add_scaled(1.0, &ga)?;
                }
            }
            if tasks.len() > 1 {
                let inv = 1.0 / tasks.len() as f64;
                critic_grad.scale(inv);
                actor_grad.scale(inv);
            }
            if !critic_grad.is_finite() || !actor_grad.is_finite() {
                return Err(Error::Numeric("Cent-AC gradient is not finite".into()));
            }
            critic_opt.descend(&mut critic, &critic_grad, alpha)?;
            actor_opt.descend(&mut actor.backbone, &actor_grad, beta)?;
            Ok(())
        })();
        if let Err(e) = result {
            if let Some(dir) = sink.write(&format!("abort_ep{episodes:06}"), &[&critic], &[&actor])? {
                return Err(Error::Aborted {
                    checkpoint: dir,
                    source: Box::new(e),
                });
            }
            return Err(e);
        }
        episodes += chunk;
        epoch += 1;
        let crossed = episodes / config.eval_every > (episodes - chunk) / config.eval_every;
        if crossed || episodes == config.max_episodes {
            reached = record(&actor, &critic, &envs, &mut eval_rngs, &mut art, epoch, episodes)?;
            if reached {
                art.reached_target_at = Some(episodes);
            }
        }
    }
    sink.write("final", &[&critic], &[&actor])?;
    art.episodes_per_agent = episodes;
    art.epochs = epoch;
    art.critics = vec![critic];
    art.actors = vec![actor];
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvState, TaskFamily};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn traj(rewards: &[f64]) -> Trajectory {
        Trajectory {
            steps: rewards
                .iter()
                .enumerate()
                .map(|(t, r)| Transition {
                    state: vec![t as f64 * 0.1, -0.2, 0.05 * t as f64, 0.3],
                    action: 0.5 - 0.1 * t as f64,
                    reward: *r,
                    next_state: vec![0.0; 4],
                })
                .collect(),
            terminal: true,
        }
    }

    fn balance_task() -> TaskSpec {
        let fam = TaskFamily::standard(FamilyKind::CartpoleBalance);
        TaskSpec {
            kind: fam.kind,
            params: fam.single_task,
        }
    }

    fn small_config() -> RunConfig {
        RunConfig {
            max_episodes: 20,
            max_steps: 30,
            hidden: vec![8],
            eval_every: 10,
            eval_episodes: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn returns_small_cases() {
        assert_eq!(mc_returns(&traj(&[1.0, 1.0, 1.0]), 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(mc_returns(&traj(&[0.3, -2.0, 4.0]), 0.0), vec![0.3, -2.0, 4.0]);
        assert!(mc_returns(&Trajectory::default(), 0.9).is_empty());
    }

    #[test]
    fn returns_match_forward_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rewards: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = 0.97;
        let got = discounted_returns(&rewards, gamma);
        for t in 0..rewards.len() {
            let direct: f64 = (t..rewards.len()).map(|j| gamma.powi((j - t) as i32) * rewards[j]).sum();
            assert_abs_diff_eq!(got[t], direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn advantage_small_cases() {
        let batch = SampleBatch::from_trajectories(&[traj(&[1.0, 2.0]), traj(&[0.5])], 0.9, 4).unwrap();
        let zero = MlpParams::zeros(vec![crate::nn::LayerShape {
            inputs: 4,
            outputs: 1,
            activation: Activation::Linear,
        }])
        .unwrap();
        assert_eq!(advantage_estimates(&batch, &zero).unwrap(), batch.returns);
        assert_eq!(batch.returns, vec![1.0 + 0.9 * 2.0, 2.0, 0.5]);
    }

    #[test]
    fn combine_cases() {
        let x = [1.0, 2.0, 3.0];
        let y = [3.0, 0.0, -1.0];
        assert_eq!(combine(&[&x, &y], &[0.5, 0.5]).unwrap(), vec![2.0, 1.0, 1.0]);
        assert_eq!(combine(&[&x, &x, &x], &[0.2, 0.3, 0.5]).unwrap(), x.to_vec());
        assert!(matches!(combine(&[&x, &y], &[0.5, 0.6]), Err(Error::Invariant(_))));
        assert!(matches!(combine(&[&x, &y[..2]], &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.actor_rate = RateSchedule::constant(0.1);
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let mut c = RunConfig::default();
        c.discount = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.critic_rate.decay = 0.5;
        assert!(c.validate().is_err(), "actor decays slower than critic");
    }

    #[test]
    fn empty_rollout() {
        let cfg = small_config();
        let mut agent = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        assert!(agent.rollout(0).unwrap().is_empty());
    }

    #[test]
    fn rollouts_are_deterministic() {
        let cfg = small_config();
        let mut a = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        let mut b = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        for _ in 0..3 {
            assert_eq!(a.rollout(50).unwrap(), b.rollout(50).unwrap());
        }
    }

    #[test]
    fn equilibrium_rollout_with_tiny_variance() {
        let cfg = RunConfig {
            hidden: vec![4],
            var_floor: 1e-30,
            ..RunConfig::default()
        };
        let mut agent = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        let flat = agent.actor.backbone.as_flat_mut();
        flat.fill(0.0);
        let last = flat.len() - 1;
        flat[last] = -60.0;
        let mut env = agent.env.clone();
        env.set_state(EnvState::Cartpole {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
        })
        .unwrap();
        // Roll out from the equilibrium without a reset.
        let mut state = env.observation();
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let a = agent.actor.sample(&state, &mut agent.rng).unwrap();
            let out = env.step(a).unwrap();
            total += out.reward;
            steps += 1;
            state = out.observation;
            if out.terminal {
                break;
            }
        }
        assert_eq!(steps, 200);
        assert_eq!(total, 200.0);

        let report = evaluate(&agent.actor, &[env], 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(report.per_task[0].returns.len(), 3);
    }

    #[test]
    fn zero_advantages_keep_parameters() {
        let cfg = small_config();
        let mut agent = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        let t = agent.rollout(10).unwrap();
        let batch = SampleBatch::from_trajectories(&[t], 0.99, 4).unwrap();
        let zeros = vec![0.0; batch.len()];
        assert_eq!(agent.critic_adapt(&batch, &zeros, 0.01).unwrap(), agent.critic);
        assert_eq!(
            agent.actor_adapt(&batch, &zeros, 0.001, 0.0, EntropyMode::Bonus).unwrap(),
            agent.actor
        );
    }

    #[test]
    fn zero_actor_rate_keeps_actor() {
        let cfg = RunConfig {
            optimizer: OptimizerKind::Sgd,
            ..small_config()
        };
        let mut agent = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        let t = agent.rollout(10).unwrap();
        let batch = SampleBatch::from_trajectories(&[t], 0.99, 4).unwrap();
        let adv = advantage_estimates(&batch, &agent.critic).unwrap();
        assert_eq!(agent.actor_adapt(&batch, &adv, 0.0, 0.0005, EntropyMode::Bonus).unwrap(), agent.actor);
    }

    #[test]
    fn single_sample_linear_critic_update() {
        // v(s) = w.s + b; SGD step must be alpha (y - v) grad v = alpha (y - v) (s, 1).
        let mut critic = MlpParams::zeros(vec![crate::nn::LayerShape {
            inputs: 4,
            outputs: 1,
            activation: Activation::Linear,
        }])
        .unwrap();
        critic.as_flat_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.4, 0.05]);
        let cfg = RunConfig {
            optimizer: OptimizerKind::Sgd,
            ..small_config()
        };
        let mut agent = Agent::new(0, balance_task(), vec![(0, 1.0)], &cfg).unwrap();
        agent.critic = critic.clone();
        let batch = SampleBatch::from_trajectories(&[traj(&[2.0])], 0.9, 4).unwrap();
        let adv = advantage_estimates(&batch, &critic).unwrap();
        let s = batch.states.row(0).to_vec();
        let v = critic.forward(&s).unwrap()[0];
        assert_eq!(adv[0], 2.0 - v);
        let next = agent.critic_adapt(&batch, &adv, 0.1).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(next.as_flat()[i], critic.as_flat()[i] + 0.1 * (2.0 - v) * s[i], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(next.as_flat()[4], critic.as_flat()[4] + 0.1 * (2.0 - v), epsilon = 1e-15);
    }

    #[test]
    fn disagreement_of_identical_vectors_is_zero() {
        assert_eq!(param_disagreement(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
        assert_eq!(param_disagreement(&[vec![0.0], vec![2.0]]), 1.0);
    }

    #[test]
    fn small_run_is_deterministic_and_reports_metrics() {
        let cfg = small_config();
        let c = crate::net::hastings_weights(&crate::net::Topology::ring(3)).unwrap();
        let tasks = vec![balance_task(); 3];
        let a = diffdac_run(&cfg, &c, &tasks, &CheckpointSink::none()).unwrap();
        let b = diffdac_run(&cfg, &c, &tasks, &CheckpointSink::none()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.episodes_per_agent, 20);
        assert_eq!(a.epochs, 4);
        // Evaluations at 0, 10 and 20 episodes: 3 agent rows + 1 average row each.
        assert_eq!(a.evals.len(), 3);
        assert_eq!(a.metrics.len(), 3 * 4);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = small_config();
        let c = crate::net::hastings_weights(&crate::net::Topology::ring(4)).unwrap();
        let tasks = vec![balance_task(); 4];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| diffdac_run(&cfg, &c, &tasks, &CheckpointSink::none()).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.critics, b.critics);
    }

    #[test]
    fn gauss_seidel_runs() {
        let cfg = RunConfig {
            gauss_seidel: true,
            ..small_config()
        };
        let c = crate::net::hastings_weights(&crate::net::Topology::ring(3)).unwrap();
        let out = diffdac_run(&cfg, &c, &vec![balance_task(); 3], &CheckpointSink::none()).unwrap();
        assert_eq!(out.actors.len(), 3);
    }

    #[test]
    fn target_return_stops_early() {
        let cfg = RunConfig {
            target_return: Some(0.0),
            ..small_config()
        };
        let out = diffdac_run(&cfg, &CombinationMatrix::identity(1), &[balance_task()], &CheckpointSink::none()).unwrap();
        assert_eq!(out.reached_target_at, Some(0));
        assert_eq!(out.episodes_per_agent, 0);
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            checkpoint_every: 1,
            ..small_config()
        };
        diffdac_run(&cfg, &CombinationMatrix::identity(1), &[balance_task()], &CheckpointSink::at(dir.path())).unwrap();
        let final_actor = dir.path().join("checkpoints/final/agent000_actor.txt");
        let text = std::fs::read_to_string(final_actor).unwrap();
        GaussianPolicyHead::from_checkpoint(&text).unwrap();
        assert!(dir.path().join("checkpoints/ep000010/agent000_critic.txt").exists());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            epoch: 1,
            episodes_per_agent: 5,
            agent_id: "mean".into(),
            task_id: 3,
            return_mean: 12.5,
            return_median: 12.0,
            return_q1: 10.0,
            return_q3: 15.0,
            param_disagreement: 0.25,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        write_metrics_csv(&path, &[]).unwrap();
        assert!(read_metrics_csv(&path).unwrap().is_empty());
    }
}
