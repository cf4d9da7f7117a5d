use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvSpec, EpisodeClock, RewardKind, StepResult};
use crate::numerics::rng_from;

pub const DT: f64 = 0.05;
pub const ARENA: f64 = 1.0;
pub const GOAL: [f64; 2] = [0.6, 0.6];
pub const GOAL_RADIUS: f64 = 0.15;

/// Planar point mass driven by a velocity command in `[−1, 1]²`.
///
/// `position' = clamp(position + DT·velocity)` inside the `[−1, 1]²` arena.
/// The dense variant pays `−‖position − goal‖` per step; the sparse variant
/// pays 1 and terminates once the goal disc is reached, 0 otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMass {
    spec: EnvSpec,
    position: [f64; 2],
    clock: EpisodeClock,
}

impl PointMass {
    pub fn new(reward_kind: RewardKind) -> Self {
        let name = match reward_kind {
            RewardKind::Dense => "pointmass-dense",
            RewardKind::Sparse => "pointmass-sparse",
        };
        PointMass {
            spec: EnvSpec {
                name: name.into(),
                state_dim: 2,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                max_episode_steps: 100,
                reward_kind,
            },
            position: [0.0; 2],
            clock: EpisodeClock::default(),
        }
    }

    pub fn reset_to(&mut self, position: [f64; 2]) -> Vec<f64> {
        self.position = position;
        self.clock.start();
        self.position.to_vec()
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn goal_distance(&self) -> f64 {
        ((self.position[0] - GOAL[0]).powi(2) + (self.position[1] - GOAL[1]).powi(2)).sqrt()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Uniform start in the arena, outside the goal disc.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, 0);
        loop {
            let p = [rng.random_range(-ARENA..ARENA), rng.random_range(-ARENA..ARENA)];
            self.position = p;
            if self.goal_distance() > GOAL_RADIUS {
                return self.reset_to(p);
            }
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        self.clock.check_active()?;
        let v = self.clock.clamp(&self.spec, action)?;
        for (p, v) in self.position.iter_mut().zip(&v) {
            *p = (*p + DT * v).clamp(-ARENA, ARENA);
        }
        let dist = self.goal_distance();
        let (reward, terminated) = match self.spec.reward_kind {
            RewardKind::Dense => (-dist, false),
            RewardKind::Sparse => {
                let success = dist <= GOAL_RADIUS;
                (if success { 1.0 } else { 0.0 }, success)
            }
        };
        let truncated = self.clock.tick(&self.spec, terminated);
        Ok(StepResult { next_state: self.position.to_vec(), reward, terminated, truncated })
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("point-mass state serializes")
    }

    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError> {
        *self = serde_json::from_value(state).map_err(|e| EnvError::Restore(e.to_string()))?;
        Ok(())
    }
}
