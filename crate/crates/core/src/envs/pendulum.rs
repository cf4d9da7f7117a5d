use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvSpec, EpisodeClock, RewardKind, StepResult};
use crate::numerics::rng_from;

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;

/// Torque-limited pendulum swing-up. `θ = 0` is upright; the observation is
/// `(cos θ, sin θ, θ̇)` and the reward `−(θ² + 0.1·θ̇² + 0.001·u²)` with θ
/// wrapped to `[−π, π)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    clock: EpisodeClock,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Pendulum {
            spec: EnvSpec {
                name: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-MAX_TORQUE],
                action_high: vec![MAX_TORQUE],
                max_episode_steps: 200,
                reward_kind: RewardKind::Dense,
            },
            theta: 0.0,
            theta_dot: 0.0,
            clock: EpisodeClock::default(),
        }
    }

    /// Places the pendulum at an exact configuration and starts an episode.
    pub fn reset_to(&mut self, theta: f64, theta_dot: f64) -> Vec<f64> {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.clock.start();
        self.observe()
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, 0);
        let theta = rng.random_range(-PI..PI);
        let theta_dot = rng.random_range(-1.0..1.0);
        self.reset_to(theta, theta_dot)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        self.clock.check_active()?;
        let u = self.clock.clamp(&self.spec, action)?[0];
        let th = angle_normalize(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);

        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.theta_dot = (self.theta_dot + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;

        let truncated = self.clock.tick(&self.spec, false);
        Ok(StepResult { next_state: self.observe(), reward, terminated: false, truncated })
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("pendulum state serializes")
    }

    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError> {
        *self = serde_json::from_value(state).map_err(|e| EnvError::Restore(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_rest_has_zero_reward() {
        let mut p = Pendulum::new();
        p.reset_to(0.0, 0.0);
        let r = p.step(&[0.0]).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.next_state, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn same_seed_same_initial_state() {
        let mut a = Pendulum::new();
        let mut b = Pendulum::new();
        assert_eq!(a.reset(42), b.reset(42));
        assert_ne!(a.reset(1), b.reset(2));
    }

    #[test]
    fn rewards_stay_in_bounds() {
        let floor = -(PI * PI + 0.1 * 64.0 + 0.001 * 4.0);
        let mut p = Pendulum::new();
        for seed in 0..20 {
            p.reset(seed);
            for k in 0..200 {
                let u = if (k / 10) % 2 == 0 { 5.0 } else { -5.0 };
                let r = p.step(&[u]).unwrap();
                assert!(r.reward <= 0.0 && r.reward >= floor);
                assert!(r.next_state[2].abs() <= MAX_SPEED);
            }
        }
    }

    #[test]
    fn gravity_pulls_away_from_upright() {
        let mut p = Pendulum::new();
        p.reset_to(0.1, 0.0);
        let r = p.step(&[0.0]).unwrap();
        // θ̇' = 15·sin(0.1)·0.05
        let expected = 15.0 * 0.1f64.sin() * DT;
        assert!((r.next_state[2] - expected).abs() < 1e-15);
    }
}
