//! Environment interface and the desk-scale tasks.
//!
//! Every environment is seeded explicitly: `reset(seed)` draws the initial
//! state from a generator derived from that seed only, and stochastic
//! wrappers own their own seeded stream. `terminated` (task-intrinsic end)
//! and `truncated` (horizon cutoff) are reported separately.

mod chain;
mod noise;
mod pendulum;
mod pointmass;
mod tabular_mdp;

pub use chain::ChainWalk;
pub use noise::ActionNoise;
pub use pendulum::Pendulum;
pub use pointmass::PointMass;
pub use tabular_mdp::TabularMdp;
pub(crate) use tabular_mdp::sample_index;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment {name:?}; valid names: {}", valid.join(", "))]
    UnknownEnv { name: String, valid: Vec<String> },
    #[error("step called {0}")]
    State(&'static str),
    #[error("action has {got} dimensions, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("invalid environment definition: {0}")]
    Invalid(String),
    #[error("environment state could not be restored: {0}")]
    Restore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    pub reward_kind: RewardKind,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.state_dim == 0 || self.action_dim == 0 || self.max_episode_steps == 0 {
            return Err(EnvError::Invalid(format!("{}: dimensions and horizon must be positive", self.name)));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(EnvError::Invalid(format!("{}: action bounds length", self.name)));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(EnvError::Invalid(format!("{}: action_low must be below action_high", self.name)));
        }
        Ok(())
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&l, &h))| a.clamp(l, h))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts an episode from an initial state drawn with `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Actions outside the bounds are clamped.
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;

    /// Full internal state, for checkpoints.
    fn save_state(&self) -> serde_json::Value;

    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError>;

    /// Whether a reward signals task success (sparse tasks only).
    fn is_success(&self, reward: f64) -> bool {
        self.spec().reward_kind == RewardKind::Sparse && reward >= 1.0
    }
}

impl Env for Box<dyn Env> {
    fn spec(&self) -> &EnvSpec {
        (**self).spec()
    }
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        (**self).reset(seed)
    }
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        (**self).step(action)
    }
    fn save_state(&self) -> serde_json::Value {
        (**self).save_state()
    }
    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError> {
        (**self).load_state(state)
    }
    fn is_success(&self, reward: f64) -> bool {
        (**self).is_success(reward)
    }
}

/// Step bookkeeping shared by every environment: horizon counting, the
/// "episode over" guard and the one-time out-of-bounds warning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct EpisodeClock {
    steps: usize,
    active: bool,
    warned_clamp: bool,
}

impl EpisodeClock {
    pub fn start(&mut self) {
        self.steps = 0;
        self.active = true;
    }

    pub fn check_active(&self) -> Result<(), EnvError> {
        if self.active {
            Ok(())
        } else {
            Err(EnvError::State("on a finished episode without reset"))
        }
    }

    /// Clamps an action into bounds, logging the first violation.
    pub fn clamp(&mut self, spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if action.len() != spec.action_dim {
            return Err(EnvError::ActionDim { expected: spec.action_dim, got: action.len() });
        }
        let clamped = spec.clamp_action(action);
        if !self.warned_clamp && clamped.iter().zip(action).any(|(c, a)| c != a) {
            self.warned_clamp = true;
            log::warn!("{}: action {action:?} outside bounds, clamped to {clamped:?}", spec.name);
        }
        Ok(clamped)
    }

    /// Counts a step and returns whether the horizon was reached.
    pub fn tick(&mut self, spec: &EnvSpec, terminated: bool) -> bool {
        self.steps += 1;
        let truncated = !terminated && self.steps >= spec.max_episode_steps;
        if terminated || truncated {
            self.active = false;
        }
        truncated
    }
}

pub const ENV_NAMES: [&str; 4] = ["pendulum", "pointmass-dense", "pointmass-sparse", "chain-mdp"];

/// Builds a registered environment.
pub fn make_env(name: &str, _seed: u64) -> Result<Box<dyn Env>, EnvError> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "pointmass-dense" => Ok(Box::new(PointMass::new(RewardKind::Dense))),
        "pointmass-sparse" => Ok(Box::new(PointMass::new(RewardKind::Sparse))),
        "chain-mdp" => Ok(Box::new(ChainWalk::new(TabularMdp::chain(5, 0.9)?))),
        _ => Err(EnvError::UnknownEnv {
            name: name.to_string(),
            valid: ENV_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// Adds `N(0, σ²)` noise to every executed action dimension.
pub fn wrap_action_noise<E: Env>(env: E, sigma: f64, seed: u64) -> Result<ActionNoise<E>, EnvError> {
    ActionNoise::new(env, sigma, seed)
}

/// Builds a registered environment, optionally wrapped with action noise.
pub fn make_noisy_env(name: &str, sigma: f64, seed: u64) -> Result<Box<dyn Env>, EnvError> {
    let env = make_env(name, seed)?;
    if sigma == 0.0 {
        Ok(env)
    } else {
        Ok(Box::new(wrap_action_noise(env, sigma, seed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_specs() {
        let p = make_env("pendulum", 0).unwrap();
        let s = p.spec();
        assert_eq!((s.state_dim, s.action_dim, s.max_episode_steps), (3, 1, 200));
        assert_eq!((s.action_low[0], s.action_high[0]), (-2.0, 2.0));
        assert_eq!(make_env("pointmass-sparse", 0).unwrap().spec().reward_kind, RewardKind::Sparse);
        assert_eq!(make_env("pointmass-dense", 0).unwrap().spec().reward_kind, RewardKind::Dense);
        for name in ENV_NAMES {
            make_env(name, 0).unwrap().spec().validate().unwrap();
        }
    }

    #[test]
    fn unknown_name_lists_valid_names() {
        let err = make_env("no-such-env", 0).err().unwrap();
        let msg = err.to_string();
        assert!(matches!(err, EnvError::UnknownEnv { .. }));
        for name in ENV_NAMES {
            assert!(msg.contains(name));
        }
    }

    #[test]
    fn seeded_trajectories_are_reproducible() {
        for name in ENV_NAMES {
            let run = || {
                let mut env = make_noisy_env(name, 0.1, 11).unwrap();
                let mut trace = vec![];
                let mut s = env.reset(5);
                trace.extend(s.iter().map(|x| x.to_bits()));
                for k in 0..150 {
                    let a: Vec<f64> = (0..env.spec().action_dim).map(|i| ((k * 7 + i) as f64).sin()).collect();
                    let r = env.step(&a).unwrap();
                    trace.push(r.reward.to_bits());
                    trace.push(r.terminated as u64);
                    trace.push(r.truncated as u64);
                    trace.extend(r.next_state.iter().map(|x| x.to_bits()));
                    s = r.next_state.clone();
                    if r.done() {
                        s = env.reset(k as u64);
                    }
                }
                let _ = s;
                trace
            };
            assert_eq!(run(), run(), "{name}");
        }
    }

    #[test]
    fn step_after_episode_end_is_state_error() {
        let mut env = make_env("pendulum", 0).unwrap();
        assert!(matches!(env.step(&[0.0]), Err(EnvError::State(_))));
        env.reset(0);
        for t in 1..=200 {
            let r = env.step(&[0.0]).unwrap();
            assert_eq!(r.truncated, t == 200);
            assert!(!r.terminated);
        }
        assert!(matches!(env.step(&[0.0]), Err(EnvError::State(_))));
    }

    #[test]
    fn state_save_restore_continues_identically() {
        for name in ENV_NAMES {
            let mut env = make_noisy_env(name, 0.05, 3).unwrap();
            env.reset(9);
            for _ in 0..3 {
                env.step(&vec![0.3; env.spec().action_dim]).unwrap();
            }
            let saved = env.save_state();
            let mut other = make_noisy_env(name, 0.05, 3).unwrap();
            other.load_state(saved).unwrap();
            for _ in 0..4 {
                let a = vec![-0.2; env.spec().action_dim];
                let x = env.step(&a);
                let y = other.step(&a);
                assert_eq!(x, y);
            }
        }
    }
}
