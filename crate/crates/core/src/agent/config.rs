use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actor::{GateConfig, GateMode};
use crate::envs::ENV_NAMES;
use crate::numerics::{Activation, ExpectileFactor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("configuration syntax: {0}")]
    Parse(String),
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Squashed-Gaussian max-entropy actor.
    #[default]
    Stochastic,
    /// Deterministic actor with Gaussian exploration noise and an L2 clone term.
    Deterministic,
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyVariant::Stochastic => "stochastic",
            PolicyVariant::Deterministic => "deterministic",
        })
    }
}

impl FromStr for PolicyVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stochastic" => Ok(PolicyVariant::Stochastic),
            "deterministic" => Ok(PolicyVariant::Deterministic),
            other => Err(field("policy", format!("unknown variant {other:?}"))),
        }
    }
}

/// Every agent hyperparameter. Defaults follow the paper's hyperparameter
/// table where it states a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub env: String,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to executed actions.
    pub action_noise: f64,
    /// Environment steps to run; not part of the configuration hash, so a
    /// checkpoint can be resumed with a longer budget.
    pub total_steps: u64,
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Expectile factor of the offline value head.
    pub tau: f64,
    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub warmup_steps: u64,
    pub updates_per_env_step: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub gate: GateMode,
    pub policy: PolicyVariant,
    pub polyak: f64,
    pub init_alpha: f64,
    pub autotune_alpha: bool,
    /// Defaults to `−action_dim`.
    pub target_entropy: Option<f64>,
    pub v_pi_samples: usize,
    pub clipped_q_pi: bool,
    pub clipped_q_mu: bool,
    /// Exploration noise of the deterministic variant, in `(−1, 1)` units.
    pub exploration_noise: f64,
    /// Train the offline value pair (`false` only for controlled comparisons).
    pub train_offline: bool,
    /// Check at every batch that unconstrained states contribute no cloning gradient.
    pub audit_gate: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            env: "pendulum".into(),
            seed: 0,
            action_noise: 0.0,
            total_steps: 30_000,
            gamma: 0.99,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            alpha_lr: 3e-4,
            batch_size: 512,
            buffer_capacity: 1_000_000,
            tau: 0.9,
            lambda: 0.001,
            hidden: vec![512, 512],
            activation: Activation::Elu,
            warmup_steps: 5000,
            updates_per_env_step: 1,
            eval_interval: 1000,
            eval_episodes: 10,
            gate: GateMode::Adaptive,
            policy: PolicyVariant::Stochastic,
            polyak: 0.005,
            init_alpha: 1.0,
            autotune_alpha: true,
            target_entropy: None,
            v_pi_samples: 1,
            clipped_q_pi: true,
            clipped_q_mu: true,
            exploration_noise: 0.1,
            train_offline: true,
            audit_gate: false,
        }
    }
}

const KEYS: &[&str] = &[
    "env",
    "seed",
    "action_noise",
    "total_steps",
    "gamma",
    "critic_lr",
    "actor_lr",
    "alpha_lr",
    "batch_size",
    "buffer_capacity",
    "tau",
    "lambda",
    "hidden",
    "activation",
    "warmup_steps",
    "updates_per_env_step",
    "eval_interval",
    "eval_episodes",
    "gate",
    "policy",
    "polyak",
    "init_alpha",
    "autotune_alpha",
    "target_entropy",
    "v_pi_samples",
    "clipped_q_pi",
    "clipped_q_mu",
    "exploration_noise",
    "train_offline",
    "audit_gate",
];

/// Parses a flat override table, fills defaults and validates ranges.
pub fn config_validate(raw: &toml::Table) -> Result<AgentConfig, ConfigError> {
    if let Some(key) = raw.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(ConfigError::UnknownKey(key.clone()));
    }
    let config: AgentConfig = raw.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

impl AgentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config_validate(&table)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return Err(field("env", format!("unknown environment {:?}; valid: {}", self.env, ENV_NAMES.join(", "))));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(field("gamma", format!("{} outside [0, 1)", self.gamma)));
        }
        let tau = self.tau;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(field("tau", format!("{tau} outside (0, 1)")));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(field("lambda", format!("{} must be finite and ≥ 0", self.lambda)));
        }
        for (name, lr) in [("critic_lr", self.critic_lr), ("actor_lr", self.actor_lr), ("alpha_lr", self.alpha_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(ConfigError::Field { field: name, message: format!("{lr} must be positive") });
            }
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(field("buffer_capacity", "must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(field("hidden", format!("{:?} needs at least one positive width", self.hidden)));
        }
        if self.updates_per_env_step == 0 {
            return Err(field("updates_per_env_step", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(field("eval_interval", "must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(field("eval_episodes", "must be positive"));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(field("polyak", format!("{} outside (0, 1]", self.polyak)));
        }
        if !(self.init_alpha > 0.0) || !self.init_alpha.is_finite() {
            return Err(field("init_alpha", format!("{} must be positive", self.init_alpha)));
        }
        if self.target_entropy.is_some_and(|h| !h.is_finite()) {
            return Err(field("target_entropy", "must be finite"));
        }
        if self.v_pi_samples == 0 {
            return Err(field("v_pi_samples", "must be at least 1"));
        }
        if !(self.exploration_noise >= 0.0) || !self.exploration_noise.is_finite() {
            return Err(field("exploration_noise", "must be finite and ≥ 0"));
        }
        if !(self.action_noise >= 0.0) || !self.action_noise.is_finite() {
            return Err(field("action_noise", "must be finite and ≥ 0"));
        }
        Ok(())
    }

    pub fn expectile(&self) -> ExpectileFactor {
        ExpectileFactor::new(self.tau).expect("validated expectile factor")
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig { lambda: self.lambda, mode: self.gate, v_pi_samples: self.v_pi_samples }
    }

    /// SHA-256 of the canonical JSON form, excluding `total_steps`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("total_steps");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short identifier derived from the hash.
    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }
}
