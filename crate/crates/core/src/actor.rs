//! The online policy: tanh-squashed Gaussian sampling, the gated
//! offline-boosted update, its deterministic variant, and the entropy
//! temperature.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng as RandRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{CriticError, CriticPair};
use crate::numerics::{
    clamp_unit_action, log1m_tanh_sq, standard_normal, Activation, AdamState, Gradients, Mlp, NumericsError,
    HALF_LOG_2PI, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::replay::Batch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error("non-finite {0}; step rejected")]
    NonFinite(String),
    #[error("invalid gate setting: {0}")]
    Gate(String),
}

/// Which states receive the behaviour-cloning constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Constrain exactly where the offline value is at least the online value.
    #[default]
    Adaptive,
    /// Constrain every state.
    FixedOn,
    /// Never constrain: the plain max-entropy actor.
    Off,
}

impl GateMode {
    pub const ALL: [GateMode; 3] = [GateMode::Adaptive, GateMode::FixedOn, GateMode::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Adaptive => "adaptive",
            GateMode::FixedOn => "fixed_on",
            GateMode::Off => "off",
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateMode {
    type Err = ActorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(GateMode::Adaptive),
            "fixed_on" | "fixed" => Ok(GateMode::FixedOn),
            "off" | "without" => Ok(GateMode::Off),
            other => Err(ActorError::Gate(format!("unknown gate mode {other:?} (expected adaptive, fixed_on or off)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Behaviour-clone weight λ ≥ 0.
    pub lambda: f64,
    pub mode: GateMode,
    /// Monte-Carlo samples for the online soft value.
    pub v_pi_samples: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { lambda: 0.001, mode: GateMode::Adaptive, v_pi_samples: 1 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), ActorError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ActorError::Gate(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if self.v_pi_samples == 0 {
            return Err(ActorError::Gate("v_pi_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-state indicator for the configured mode.
    pub fn indicators(&self, v_mu: &Array1<f64>, v_pi: &Array1<f64>) -> Array1<f64> {
        match self.mode {
            GateMode::Adaptive => {
                ndarray::Zip::from(v_mu).and(v_pi).map_collect(|&m, &p| f64::from(gate_indicator(m, p)))
            }
            GateMode::FixedOn => Array1::ones(v_mu.len()),
            GateMode::Off => Array1::zeros(v_mu.len()),
        }
    }
}

/// `𝟙(v_mu − v_pi ≥ 0)`; ties constrain.
#[inline]
pub fn gate_indicator(v_mu: f64, v_pi: f64) -> u8 {
    u8::from(v_mu - v_pi >= 0.0)
}

/// Actions drawn for a batch of states.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// Environment-scale actions.
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
}

/// State → (mean, log-std) network with tanh squashing and affine action scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquashedGaussianPolicy {
    pub net: Mlp,
    opt: AdamState,
    center: Vec<f64>,
    half_range: Vec<f64>,
}

/// Forward pass quantities shared by sampling and updates.
struct Heads {
    mean: Array2<f64>,
    log_std: Array2<f64>,
    /// Whether the raw log-std output lies inside the clamp range.
    log_std_free: Array2<bool>,
}

fn split_heads(out: &Array2<f64>, m: usize) -> Heads {
    let raw = out.slice(s![.., m..]);
    Heads {
        mean: out.slice(s![.., ..m]).to_owned(),
        log_std: raw.mapv(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)),
        log_std_free: raw.mapv(|x| (LOG_STD_MIN..=LOG_STD_MAX).contains(&x)),
    }
}

impl SquashedGaussianPolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: RandRng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self, ActorError> {
        let mut sizes = vec![state_dim];
        sizes.extend(hidden);
        sizes.push(2 * action_dim);
        let net = Mlp::new(&sizes, activation, rng)?;
        Self::from_net(net, action_low, action_high, lr)
    }

    pub fn from_net(net: Mlp, action_low: Vec<f64>, action_high: Vec<f64>, lr: f64) -> Result<Self, ActorError> {
        let m = action_low.len();
        if action_high.len() != m || net.output_dim() != 2 * m {
            return Err(NumericsError::Dimension(format!(
                "policy outputs {} values for bounds of length {} and {}",
                net.output_dim(),
                m,
                action_high.len()
            ))
            .into());
        }
        if action_low.iter().zip(&action_high).any(|(l, h)| !(l < h)) {
            return Err(NumericsError::Domain("action bounds must satisfy low < high".into()).into());
        }
        let center = action_low.iter().zip(&action_high).map(|(l, h)| 0.5 * (l + h)).collect();
        let half_range = action_low.iter().zip(&action_high).map(|(l, h)| 0.5 * (h - l)).collect();
        Ok(SquashedGaussianPolicy { opt: AdamState::for_mlp(&net, lr), net, center, half_range })
    }

    pub fn action_dim(&self) -> usize {
        self.center.len()
    }

    pub fn half_range(&self) -> &[f64] {
        &self.half_range
    }

    /// `(−1, 1)` → environment units.
    pub fn scale(&self, unit: &mut Array2<f64>) {
        for mut row in unit.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.center[j] + self.half_range[j] * *x;
            }
        }
    }

    /// Environment units → `(−1, 1)`, clamped away from the boundary.
    pub fn unscale(&self, actions: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = actions.to_owned();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = clamp_unit_action((*x - self.center[j]) / self.half_range[j]);
            }
        }
        out
    }

    /// Mean and clamped log-std for each state.
    pub fn distribution(&self, states: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>), ActorError> {
        let out = self.net.predict_batch(states)?;
        let h = split_heads(&out, self.action_dim());
        Ok((h.mean, h.log_std))
    }

    /// Reparameterised samples `a = scale(tanh(μ + σε))` with their log-densities
    /// (in squashed units). Noise is drawn row by row.
    pub fn sample_batch<R: RandRng + ?Sized>(
        &self,
        states: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<PolicySample, ActorError> {
        let (mean, log_std) = self.distribution(states)?;
        let eps = Array2::from_shape_simple_fn(mean.raw_dim(), || standard_normal(rng));
        Ok(self.squash(&mean, &log_std, &eps))
    }

    fn squash(&self, mean: &Array2<f64>, log_std: &Array2<f64>, eps: &Array2<f64>) -> PolicySample {
        let (n, m) = mean.dim();
        let mut actions = Array2::zeros((n, m));
        let mut log_probs = Array1::zeros(n);
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..m {
                let e = eps[[i, j]];
                let ls = log_std[[i, j]];
                let u = mean[[i, j]] + ls.exp() * e;
                lp += -0.5 * e * e - ls - HALF_LOG_2PI - log1m_tanh_sq(u);
                actions[[i, j]] = clamp_unit_action(u.tanh());
            }
            log_probs[i] = lp;
        }
        self.scale(&mut actions);
        PolicySample { actions, log_probs }
    }

    /// Single-state action. Deterministic mode returns `scale(tanh(μ))` and the
    /// density at that point.
    pub fn sample_action<R: RandRng + ?Sized>(
        &self,
        state: &[f64],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(Vec<f64>, f64), ActorError> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| NumericsError::Dimension(e.to_string()))?;
        let (mean, log_std) = self.distribution(x)?;
        let eps = if deterministic {
            Array2::zeros(mean.raw_dim())
        } else {
            Array2::from_shape_simple_fn(mean.raw_dim(), || standard_normal(rng))
        };
        let sample = self.squash(&mean, &log_std, &eps);
        Ok((sample.actions.row(0).to_vec(), sample.log_probs[0]))
    }

    /// Deterministic actions `scale(tanh(μ))` for a batch.
    pub fn mean_actions(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>, ActorError> {
        let (mean, _) = self.distribution(states)?;
        let mut a = mean.mapv(|u| clamp_unit_action(u.tanh()));
        self.scale(&mut a);
        Ok(a)
    }

    /// Log-density of given environment-scale actions.
    pub fn log_prob(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array1<f64>, ActorError> {
        let (mean, log_std) = self.distribution(states)?;
        let unit = self.unscale(actions);
        let mut out = Array1::zeros(mean.nrows());
        for i in 0..mean.nrows() {
            out[i] = crate::numerics::squashed_gaussian_logprob(
                mean.row(i).as_slice().unwrap(),
                log_std.row(i).as_slice().unwrap(),
                unit.row(i).as_slice().unwrap(),
            )?;
        }
        Ok(out)
    }

    fn apply(&mut self, grads: &Gradients) -> Result<(), ActorError> {
        if !grads.is_finite() {
            return Err(ActorError::NonFinite("policy gradient".into()));
        }
        self.opt.step(&mut self.net, grads)?;
        Ok(())
    }

    /// One step of the gated max-entropy objective. Returns the loss, the
    /// gate fraction and the log-densities of the reparameterised samples
    /// (for the temperature update).
    #[allow(clippy::too_many_arguments)]
    pub fn update_policy_adaptive<R: RandRng + ?Sized>(
        &mut self,
        critic: &CriticPair,
        batch: &Batch,
        gates: &Array1<f64>,
        alpha: f64,
        gate: &GateConfig,
        rng: &mut R,
    ) -> Result<AdaptiveStep, ActorError> {
        let eps = Array2::from_shape_simple_fn((batch.len(), self.action_dim()), || standard_normal(rng));
        let weights = bc_weights(gate, gates);
        let obj = adaptive_objective(self, critic, batch.states.view(), batch.actions.view(), &eps, &weights, alpha)?;
        if !obj.loss.is_finite() {
            return Err(ActorError::NonFinite("actor loss".into()));
        }
        self.apply(&obj.grads)?;
        Ok(AdaptiveStep { loss: obj.loss, gate_fraction: mean(gates), log_probs: obj.log_probs })
    }

    /// One step of the deterministic variant: `−Q(s, π(s)) + λ𝟙·‖π(s) − a_buf‖²`.
    pub fn update_policy_deterministic(
        &mut self,
        critic: &CriticPair,
        batch: &Batch,
        gates: &Array1<f64>,
        gate: &GateConfig,
    ) -> Result<(f64, f64), ActorError> {
        let weights = bc_weights(gate, gates);
        let (loss, grads) = deterministic_objective(self, critic, batch.states.view(), batch.actions.view(), &weights)?;
        if !loss.is_finite() {
            return Err(ActorError::NonFinite("actor loss".into()));
        }
        self.apply(&grads)?;
        Ok((loss, mean(gates)))
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveStep {
    pub loss: f64,
    pub gate_fraction: f64,
    pub log_probs: Array1<f64>,
}

fn mean(x: &Array1<f64>) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.sum() / x.len() as f64
    }
}

/// `λ·𝟙ᵢ` per state.
pub fn bc_weights(gate: &GateConfig, gates: &Array1<f64>) -> Array1<f64> {
    gates.mapv(|g| gate.lambda * g)
}

/// Loss value, parameter gradient and sample log-densities of the stochastic objective.
pub struct Objective {
    pub loss: f64,
    pub grads: Gradients,
    pub log_probs: Array1<f64>,
}

/// `mean_i[α log π(aᵢ|sᵢ) − min Q(sᵢ, aᵢ) − wᵢ log π(a_bufᵢ|sᵢ)]` with
/// `aᵢ = scale(tanh(μ + σεᵢ))` for the given noise `ε`. Rows with `wᵢ = 0`
/// skip the behaviour-cloning term entirely.
pub fn adaptive_objective(
    policy: &SquashedGaussianPolicy,
    critic: &CriticPair,
    states: ArrayView2<'_, f64>,
    buffer_actions: ArrayView2<'_, f64>,
    eps: &Array2<f64>,
    bc_weights: &Array1<f64>,
    alpha: f64,
) -> Result<Objective, ActorError> {
    let m = policy.action_dim();
    let n = states.nrows();
    let nf = n as f64;
    let (out, mut tape) = policy.net.forward_batch(states)?;
    let h = split_heads(&out, m);

    // reparameterised sample
    let u = &h.mean + &(h.log_std.mapv(f64::exp) * eps);
    let t = u.mapv(f64::tanh);
    let mut a_env = t.clone();
    policy.scale(&mut a_env);
    let (q, dq_da) = critic.q_min_action_grad(states, a_env.view())?;

    let mut log_probs = Array1::zeros(n);
    let mut d_out = Array2::zeros((n, 2 * m));
    let mut loss = 0.0;
    let buf_unit = policy.unscale(buffer_actions);
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..m {
            let e = eps[[i, j]];
            let ls = h.log_std[[i, j]];
            let uij = u[[i, j]];
            lp += -0.5 * e * e - ls - HALF_LOG_2PI - log1m_tanh_sq(uij);
            let tij = t[[i, j]];
            let one_minus_t2 = (1.0 - tij) * (1.0 + tij);
            // ∂/∂u of α log π − Q
            let g_u = alpha * 2.0 * tij - dq_da[[i, j]] * policy.half_range[j] * one_minus_t2;
            d_out[[i, j]] = g_u / nf;
            if h.log_std_free[[i, j]] {
                d_out[[i, m + j]] = (g_u * ls.exp() * e - alpha) / nf;
            }
        }
        log_probs[i] = lp;
        loss += alpha * lp - q[i];

        let w = bc_weights[i];
        if w != 0.0 {
            let mut lp_buf = 0.0;
            for j in 0..m {
                let ub = buf_unit[[i, j]].atanh();
                let ls = h.log_std[[i, j]];
                let inv_var = (-2.0 * ls).exp();
                let diff = ub - h.mean[[i, j]];
                let z2 = diff * diff * inv_var;
                lp_buf += -0.5 * z2 - ls - HALF_LOG_2PI - log1m_tanh_sq(ub);
                d_out[[i, j]] -= w * diff * inv_var / nf;
                if h.log_std_free[[i, j]] {
                    d_out[[i, m + j]] -= w * (z2 - 1.0) / nf;
                }
            }
            loss -= w * lp_buf;
        }
    }
    let (grads, _) = tape.backward_batch(d_out.view())?;
    Ok(Objective { loss: loss / nf, grads, log_probs })
}

/// Parameter gradient of the behaviour-cloning term alone, `−mean_i wᵢ log π(a_bufᵢ|sᵢ)`.
/// Used to audit that unconstrained states contribute nothing.
pub fn bc_gradient(
    policy: &SquashedGaussianPolicy,
    states: ArrayView2<'_, f64>,
    buffer_actions: ArrayView2<'_, f64>,
    bc_weights: &Array1<f64>,
) -> Result<Gradients, ActorError> {
    let m = policy.action_dim();
    let n = states.nrows();
    let nf = n as f64;
    let (out, mut tape) = policy.net.forward_batch(states)?;
    let h = split_heads(&out, m);
    let buf_unit = policy.unscale(buffer_actions);
    let mut d_out = Array2::zeros((n, 2 * m));
    for i in 0..n {
        let w = bc_weights[i];
        if w == 0.0 {
            continue;
        }
        for j in 0..m {
            let ub = buf_unit[[i, j]].atanh();
            let inv_var = (-2.0 * h.log_std[[i, j]]).exp();
            let diff = ub - h.mean[[i, j]];
            d_out[[i, j]] = -w * diff * inv_var / nf;
            if h.log_std_free[[i, j]] {
                d_out[[i, m + j]] = -w * (diff * diff * inv_var - 1.0) / nf;
            }
        }
    }
    Ok(tape.backward_batch(d_out.view())?.0)
}

/// `mean_i[−min Q(sᵢ, π(sᵢ)) + wᵢ‖π(sᵢ) − a_bufᵢ‖²]` with `π(s) = scale(tanh(μ(s)))`,
/// distances in environment units. The log-std outputs receive no gradient.
pub fn deterministic_objective(
    policy: &SquashedGaussianPolicy,
    critic: &CriticPair,
    states: ArrayView2<'_, f64>,
    buffer_actions: ArrayView2<'_, f64>,
    bc_weights: &Array1<f64>,
) -> Result<(f64, Gradients), ActorError> {
    let m = policy.action_dim();
    let n = states.nrows();
    let nf = n as f64;
    let (out, mut tape) = policy.net.forward_batch(states)?;
    let t = out.slice(s![.., ..m]).mapv(f64::tanh);
    let mut a_env = t.clone();
    policy.scale(&mut a_env);
    let (q, dq_da) = critic.q_min_action_grad(states, a_env.view())?;
    let mut d_out = Array2::zeros((n, 2 * m));
    let mut loss = 0.0;
    for i in 0..n {
        loss -= q[i];
        let w = bc_weights[i];
        for j in 0..m {
            let mut g_a = -dq_da[[i, j]];
            if w != 0.0 {
                let diff = a_env[[i, j]] - buffer_actions[[i, j]];
                loss += w * diff * diff;
                g_a += 2.0 * w * diff;
            }
            let tij = t[[i, j]];
            d_out[[i, j]] = g_a * policy.half_range[j] * (1.0 - tij) * (1.0 + tij) / nf;
        }
    }
    let (grads, _) = tape.backward_batch(d_out.view())?;
    Ok((loss / nf, grads))
}

/// Learned entropy temperature `α = exp(log α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureState {
    pub log_alpha: f64,
    pub target_entropy: f64,
    opt: AdamState,
}

impl TemperatureState {
    pub fn new(initial_alpha: f64, target_entropy: f64, lr: f64) -> Result<Self, ActorError> {
        if !(initial_alpha > 0.0) || !initial_alpha.is_finite() {
            return Err(NumericsError::Domain(format!("initial temperature {initial_alpha} must be positive")).into());
        }
        Ok(TemperatureState { log_alpha: initial_alpha.ln(), target_entropy, opt: AdamState::with_shapes(&[1], lr) })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Gradient of `mean[−log α·(log π + H̄)]` with respect to `log α`.
    pub fn gradient(&self, log_probs: &Array1<f64>) -> f64 {
        -mean(&log_probs.mapv(|lp| lp + self.target_entropy))
    }

    /// One Adam step on `log α`; returns the new `α`.
    pub fn update_temperature(&mut self, log_probs: &Array1<f64>) -> Result<f64, ActorError> {
        let g = self.gradient(log_probs);
        if !g.is_finite() {
            return Err(ActorError::NonFinite("temperature gradient".into()));
        }
        self.opt.step_scalar(&mut self.log_alpha, g)?;
        Ok(self.alpha())
    }
}
