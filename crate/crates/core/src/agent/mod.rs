//! The training loop: environment interaction, buffer writes, one gradient
//! tick over `{Q^π, Q^μ*, V^μ*, π, α}` per update, periodic evaluation, and
//! checkpoints that resume bit-for-bit.
//!
//! Randomness is split into independent streams of the run seed so that
//! components which do not exist in a configuration (e.g. the offline pair
//! when it is not trained) cannot shift any other draw:
//!
//! | stream          | used for                                        |
//! |-----------------|-------------------------------------------------|
//! | [`STREAM_INIT`]   | network initialisation (π, Q^π, Q^μ*, V^μ* in that order) |
//! | [`STREAM_ACT`]    | warmup actions, policy samples, exploration noise |
//! | [`STREAM_UPDATE`] | batch indices, target samples, actor noise       |
//! | [`STREAM_GATE`]   | Monte-Carlo samples of `V^π` for the gate        |
//!
//! Episode reset seeds come from [`derive_seed`] with [`TAG_RESET`] and the
//! episode index; evaluation episodes use [`TAG_EVAL`], so every checkpoint
//! is evaluated on the same start states.

mod checkpoint;
mod config;

pub use checkpoint::{checkpoint_load, checkpoint_save, CHECKPOINT_VERSION};
pub use config::*;

use std::time::Instant;

use ndarray::{Array1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{bc_gradient, bc_weights, ActorError, GateConfig, SquashedGaussianPolicy, TemperatureState};
use crate::critic::{compute_v_pi, deterministic_v_pi, CriticError, CriticPair, CriticShape, OfflineValueHead};
use crate::envs::{make_noisy_env, Env, EnvError, EnvSpec, RewardKind};
use crate::harness::{RunLog, RunRow};
use crate::numerics::{rng_from, standard_normal, Rng};
use crate::replay::{Batch, ReplayBuffer, ReplayError, Transition};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_ACT: u64 = 2;
pub const STREAM_UPDATE: u64 = 3;
pub const STREAM_GATE: u64 = 4;

pub const TAG_RESET: u64 = 0x7265_7365_7400;
pub const TAG_EVAL: u64 = 0x6576_616c_0000;
/// Seed of the training environment's action-noise stream.
pub const TAG_NOISE: u64 = 0x6e6f_6973_6500;
/// Seed of the evaluation environment's action-noise stream.
pub const TAG_EVAL_NOISE: u64 = 0x6576_6e6f_6900;

/// SplitMix64 finaliser over `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error("run aborted at env step {} (gradient step {}, {}): {}", .0.env_step, .0.grad_step, .0.phase, .0.message)]
    Aborted(Box<Diagnostic>),
    #[error("gate audit failed: {0}")]
    Audit(String),
    #[error("checkpoint refused: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// State captured when a numeric step is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub env_step: u64,
    pub grad_step: u64,
    pub phase: String,
    pub message: String,
    pub config_hash: String,
    pub alpha: f64,
    pub buffer_len: usize,
    pub last_tick: Option<TickStats>,
    pub last_row: Option<RunRow>,
}

/// Quantities produced by one gradient tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickStats {
    pub loss_q_pi: f64,
    pub loss_q_mu: Option<f64>,
    pub loss_v_mu: Option<f64>,
    pub loss_actor: f64,
    pub alpha: f64,
    pub gate_fraction: f64,
    pub v_pi_mean: f64,
    pub v_mu_mean: f64,
}

/// Running sums of tick diagnostics since the last log row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Accumulator {
    ticks: u64,
    offline_ticks: u64,
    loss_q_pi: f64,
    loss_q_mu: f64,
    loss_v_mu: f64,
    loss_actor: f64,
    gate_fraction: f64,
    v_pi: f64,
    v_mu: f64,
}

impl Accumulator {
    fn add(&mut self, t: &TickStats) {
        self.ticks += 1;
        self.loss_q_pi += t.loss_q_pi;
        self.loss_actor += t.loss_actor;
        self.gate_fraction += t.gate_fraction;
        self.v_pi += t.v_pi_mean;
        self.v_mu += t.v_mu_mean;
        if let (Some(q), Some(v)) = (t.loss_q_mu, t.loss_v_mu) {
            self.offline_ticks += 1;
            self.loss_q_mu += q;
            self.loss_v_mu += v;
        }
    }

    fn mean(sum: f64, n: u64) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

/// Outcome of the gate-soundness audit: the cloning gradient restricted to
/// states with indicator 0, at every audited batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateAudit {
    pub batches: u64,
    pub ungated_rows: u64,
    /// Largest L2 norm seen; zero when the gate is sound.
    pub max_norm: f64,
}

/// Parameters and optimiser states of every learned component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learners {
    pub policy: SquashedGaussianPolicy,
    pub q_pi: CriticPair,
    pub q_mu: CriticPair,
    pub v_mu: OfflineValueHead,
    pub temperature: TemperatureState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Streams {
    act: Rng,
    update: Rng,
    gate: Rng,
}

/// Per-episode returns of a deterministic-mode evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
    pub mean: f64,
    /// Population standard deviation of `returns`.
    pub std: f64,
    /// Fraction of successful episodes; sparse-reward environments only.
    pub success_rate: Option<f64>,
}

/// Rolls out `episodes` episodes with `act`, starting episode `k` from
/// `reset(derive_seed(seed, TAG_EVAL, k))`.
pub fn evaluate<F>(mut act: F, env: &mut dyn Env, episodes: usize, seed: u64) -> Result<EvalResult, AgentError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, AgentError>,
{
    if episodes == 0 {
        return Err(ConfigError::Field { field: "eval_episodes", message: "must be positive".into() }.into());
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(derive_seed(seed, TAG_EVAL, k as u64));
        let mut total = 0.0;
        let mut success = false;
        loop {
            let a = act(&obs)?;
            let r = env.step(&a)?;
            total += r.reward;
            success |= env.is_success(r.reward);
            if r.done() {
                break;
            }
            obs = r.next_state;
        }
        returns.push(total);
        successes.push(success);
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let success_rate = (env.spec().reward_kind == RewardKind::Sparse)
        .then(|| successes.iter().filter(|&&s| s).count() as f64 / n);
    Ok(EvalResult { returns, successes, mean, std, success_rate })
}

/// `scale(tanh(μ(s)))` for one state.
pub fn greedy_action(policy: &SquashedGaussianPolicy, state: &[f64]) -> Result<Vec<f64>, AgentError> {
    let x = ArrayView2::from_shape((1, state.len()), state)
        .map_err(|e| ActorError::Numerics(crate::numerics::NumericsError::Dimension(e.to_string())))?;
    Ok(policy.mean_actions(x)?.row(0).to_vec())
}

/// One OBAC (or reduced) agent with its environment, buffer and log.
pub struct Agent {
    config: AgentConfig,
    spec: EnvSpec,
    env: Box<dyn Env>,
    buffer: ReplayBuffer,
    nets: Learners,
    rngs: Streams,
    env_step: u64,
    grad_steps: u64,
    episode: u64,
    obs: Vec<f64>,
    log: RunLog,
    acc: Accumulator,
    last_tick: Option<TickStats>,
    audit: GateAudit,
    wall_ms_before: u64,
    started: Instant,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let seed = config.seed;
        let mut env = make_noisy_env(&config.env, config.action_noise, derive_seed(seed, TAG_NOISE, 0))?;
        let spec = env.spec().clone();
        let buffer = ReplayBuffer::new(config.buffer_capacity, spec.state_dim, spec.action_dim)?;
        let nets = Self::init_learners(&config, &spec)?;
        let obs = env.reset(derive_seed(seed, TAG_RESET, 0));
        Ok(Agent {
            rngs: Streams {
                act: rng_from(seed, STREAM_ACT),
                update: rng_from(seed, STREAM_UPDATE),
                gate: rng_from(seed, STREAM_GATE),
            },
            config,
            spec,
            env,
            buffer,
            nets,
            env_step: 0,
            grad_steps: 0,
            episode: 0,
            obs,
            log: RunLog::default(),
            acc: Accumulator::default(),
            last_tick: None,
            audit: GateAudit::default(),
            wall_ms_before: 0,
            started: Instant::now(),
        })
    }

    fn init_learners(config: &AgentConfig, spec: &EnvSpec) -> Result<Learners, AgentError> {
        let mut rng = rng_from(config.seed, STREAM_INIT);
        let policy = SquashedGaussianPolicy::new(
            spec.state_dim,
            spec.action_dim,
            &config.hidden,
            config.activation,
            spec.action_low.clone(),
            spec.action_high.clone(),
            config.actor_lr,
            &mut rng,
        )?;
        let shape = CriticShape {
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            hidden: config.hidden.clone(),
            activation: config.activation,
            lr: config.critic_lr,
        };
        let mut q_pi = CriticPair::new(&shape, &mut rng)?;
        q_pi.clipped = config.clipped_q_pi;
        let mut q_mu = CriticPair::new(&shape, &mut rng)?;
        q_mu.clipped = config.clipped_q_mu;
        let v_mu = OfflineValueHead::new(&shape, config.expectile(), &mut rng)?;
        let target = config.target_entropy.unwrap_or(-(spec.action_dim as f64));
        let temperature = TemperatureState::new(config.init_alpha, target, config.alpha_lr)?;
        Ok(Learners { policy, q_pi, q_mu, v_mu, temperature })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn env_step(&self) -> u64 {
        self.env_step
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn learners(&self) -> &Learners {
        &self.nets
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    pub fn audit(&self) -> &GateAudit {
        &self.audit
    }

    pub fn last_tick(&self) -> Option<&TickStats> {
        self.last_tick.as_ref()
    }

    /// Current entropy temperature; 0 for the deterministic variant.
    pub fn alpha(&self) -> f64 {
        match self.config.policy {
            PolicyVariant::Stochastic => self.nets.temperature.alpha(),
            PolicyVariant::Deterministic => 0.0,
        }
    }

    pub fn wall_ms(&self) -> u64 {
        self.wall_ms_before + self.started.elapsed().as_millis() as u64
    }

    fn choose_action(&mut self) -> Result<Vec<f64>, AgentError> {
        let rng = &mut self.rngs.act;
        if self.env_step < self.config.warmup_steps {
            return Ok(self.spec.action_low.iter().zip(&self.spec.action_high).map(|(&l, &h)| rng.random_range(l..h)).collect());
        }
        match self.config.policy {
            PolicyVariant::Stochastic => Ok(self.nets.policy.sample_action(&self.obs, rng, false)?.0),
            PolicyVariant::Deterministic => {
                let mut a = greedy_action(&self.nets.policy, &self.obs)?;
                for (j, x) in a.iter_mut().enumerate() {
                    *x += self.config.exploration_noise * self.nets.policy.half_range()[j] * standard_normal(rng);
                }
                Ok(self.spec.clamp_action(&a))
            }
        }
    }

    /// One environment step, the gradient ticks it schedules, and a log row
    /// when the step count reaches an evaluation point.
    pub fn step(&mut self) -> Result<(), AgentError> {
        let action = self.choose_action()?;
        let result = self.env.step(&action)?;
        // The requested action is stored; any executed noise stays inside the env.
        self.buffer.push(Transition {
            state: self.obs.clone(),
            action,
            reward: result.reward,
            next_state: result.next_state.clone(),
            terminated: result.terminated,
        })?;
        self.env_step += 1;
        if result.done() {
            self.episode += 1;
            self.obs = self.env.reset(derive_seed(self.config.seed, TAG_RESET, self.episode));
        } else {
            self.obs = result.next_state;
        }
        if self.env_step >= self.config.warmup_steps {
            for _ in 0..self.config.updates_per_env_step {
                let stats = self.tick().map_err(|(phase, e)| self.abort(phase, e))?;
                self.acc.add(&stats);
                self.last_tick = Some(stats);
            }
        }
        if self.env_step.is_multiple_of(self.config.eval_interval) {
            self.record_row()?;
        }
        Ok(())
    }

    /// Steps until `env_step` reaches `total`.
    pub fn run_until(&mut self, total: u64) -> Result<(), AgentError> {
        while self.env_step < total {
            self.step()?;
        }
        Ok(())
    }

    fn abort(&self, phase: &'static str, err: AgentError) -> AgentError {
        if matches!(err, AgentError::Audit(_)) {
            return err;
        }
        let d = Diagnostic {
            env_step: self.env_step,
            grad_step: self.grad_steps,
            phase: phase.to_string(),
            message: err.to_string(),
            config_hash: self.config.hash(),
            alpha: self.alpha(),
            buffer_len: self.buffer.len(),
            last_tick: self.last_tick.clone(),
            last_row: self.log.last().cloned(),
        };
        log::error!("aborting run {}: {}", self.config.run_id(), err);
        AgentError::Aborted(Box::new(d))
    }

    /// One gradient tick. Gate inputs `V^π` and `V^μ*` are computed on the
    /// sampled states before any parameter moves and stay frozen for the
    /// actor step.
    fn tick(&mut self) -> Result<TickStats, (&'static str, AgentError)> {
        fn at<E: Into<AgentError>>(phase: &'static str) -> impl FnOnce(E) -> (&'static str, AgentError) {
            move |e| (phase, e.into())
        }
        let c = &self.config;
        let gate = c.gate_config();
        let batch = self.buffer.sample_batch(c.batch_size, &mut self.rngs.update).map_err(at("sample"))?;
        let alpha = self.alpha();
        let nets = &mut self.nets;

        let v_pi = match c.policy {
            PolicyVariant::Stochastic => compute_v_pi(
                &nets.q_pi,
                &nets.policy,
                batch.states.view(),
                alpha,
                c.v_pi_samples,
                &mut self.rngs.gate,
            ),
            PolicyVariant::Deterministic => deterministic_v_pi(&nets.q_pi, &nets.policy, batch.states.view()),
        }
        .map_err(at("v_pi"))?;
        let v_mu = nets.v_mu.value(batch.states.view()).map_err(at("v_mu"))?;
        let gates = gate.indicators(&v_mu, &v_pi);

        let loss_q_pi = match c.policy {
            PolicyVariant::Stochastic => {
                nets.q_pi.update_q_pi(&batch, &nets.policy, alpha, c.gamma, &mut self.rngs.update)
            }
            PolicyVariant::Deterministic => nets.q_pi.update_q_pi_deterministic(&batch, &nets.policy, c.gamma),
        }
        .map_err(at("q_pi"))?;

        let (loss_q_mu, loss_v_mu) = if c.train_offline {
            let q = nets.q_mu.update_q_mu(&nets.v_mu, &batch, c.gamma).map_err(at("q_mu"))?;
            let v = nets.v_mu.update_v_mu(&nets.q_mu, &batch).map_err(at("v_mu"))?;
            (Some(q), Some(v))
        } else {
            (None, None)
        };

        if c.audit_gate {
            audit_batch(&mut self.audit, &nets.policy, &batch, &gate, &gates).map_err(at("audit"))?;
        }

        let (loss_actor, gate_fraction) = match c.policy {
            PolicyVariant::Stochastic => {
                let step = nets
                    .policy
                    .update_policy_adaptive(&nets.q_pi, &batch, &gates, alpha, &gate, &mut self.rngs.update)
                    .map_err(at("actor"))?;
                if c.autotune_alpha {
                    nets.temperature.update_temperature(&step.log_probs).map_err(at("alpha"))?;
                }
                (step.loss, step.gate_fraction)
            }
            PolicyVariant::Deterministic => nets
                .policy
                .update_policy_deterministic(&nets.q_pi, &batch, &gates, &gate)
                .map_err(at("actor"))?,
        };

        nets.q_pi.polyak(c.polyak).map_err(at("polyak"))?;
        if c.train_offline {
            nets.q_mu.polyak(c.polyak).map_err(at("polyak"))?;
        }
        self.grad_steps += 1;
        Ok(TickStats {
            loss_q_pi,
            loss_q_mu,
            loss_v_mu,
            loss_actor,
            alpha: self.alpha(),
            gate_fraction,
            v_pi_mean: mean(&v_pi),
            v_mu_mean: mean(&v_mu),
        })
    }

    /// Deterministic-mode evaluation on a fresh copy of the environment
    /// (including its action-noise wrapper).
    pub fn evaluate(&self) -> Result<EvalResult, AgentError> {
        let c = &self.config;
        let mut env = make_noisy_env(&c.env, c.action_noise, derive_seed(c.seed, TAG_EVAL_NOISE, 0))?;
        let policy = &self.nets.policy;
        evaluate(|s| greedy_action(policy, s), env.as_mut(), c.eval_episodes, c.seed)
    }

    fn record_row(&mut self) -> Result<(), AgentError> {
        let eval = self.evaluate()?;
        let a = std::mem::take(&mut self.acc);
        let row = RunRow {
            env_step: self.env_step,
            wall_ms: self.wall_ms(),
            eval_return_mean: eval.mean,
            eval_return_std: eval.std,
            success_rate: eval.success_rate,
            loss_q_pi: Accumulator::mean(a.loss_q_pi, a.ticks),
            loss_q_mu: Accumulator::mean(a.loss_q_mu, a.offline_ticks),
            loss_v_mu: Accumulator::mean(a.loss_v_mu, a.offline_ticks),
            loss_actor: Accumulator::mean(a.loss_actor, a.ticks),
            alpha: self.alpha(),
            gate_fraction: Accumulator::mean(a.gate_fraction, a.ticks),
            v_pi_mean: Accumulator::mean(a.v_pi, a.ticks),
            v_mu_mean: Accumulator::mean(a.v_mu, a.ticks),
            seed: self.config.seed,
            run_id: self.config.run_id(),
        };
        log::info!(
            "{} step {}: return {:.2} ± {:.2}, gate {:?}",
            row.run_id,
            row.env_step,
            row.eval_return_mean,
            row.eval_return_std,
            row.gate_fraction
        );
        self.log.push(row).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        Ok(())
    }
}

fn mean(x: &Array1<f64>) -> f64 {
    x.sum() / x.len().max(1) as f64
}

/// Computes the cloning gradient with the production weights masked to the
/// rows whose indicator is 0, and requires it to be exactly zero.
fn audit_batch(
    audit: &mut GateAudit,
    policy: &SquashedGaussianPolicy,
    batch: &Batch,
    gate: &GateConfig,
    gates: &Array1<f64>,
) -> Result<(), AgentError> {
    let weights = bc_weights(gate, gates);
    let masked = ndarray::Zip::from(&weights).and(gates).map_collect(|&w, &g| if g == 0.0 { w } else { 0.0 });
    let grads = bc_gradient(policy, batch.states.view(), batch.actions.view(), &masked)?;
    let norm = grads.l2_norm();
    audit.batches += 1;
    audit.ungated_rows += gates.iter().filter(|&&g| g == 0.0).count() as u64;
    audit.max_norm = audit.max_norm.max(norm);
    if !grads.is_exactly_zero() {
        return Err(AgentError::Audit(format!("cloning gradient norm {norm:e} on unconstrained states")));
    }
    Ok(())
}

/// Runs a full training run and returns its log.
pub fn train(config: AgentConfig) -> Result<RunLog, AgentError> {
    let total = config.total_steps;
    let mut agent = Agent::new(config)?;
    agent.run_until(total)?;
    Ok(agent.into_log())
}
