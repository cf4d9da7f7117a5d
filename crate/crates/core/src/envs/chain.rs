use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tabular_mdp::sample_index;
use super::{Env, EnvError, EnvSpec, EpisodeClock, RewardKind, StepResult, TabularMdp};
use crate::numerics::{rng_from, Rng};

/// A finite MDP exposed through the continuous interface: one-hot states and
/// a scalar action in `[−1, 1]` split into `n_actions` equal bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainWalk {
    spec: EnvSpec,
    mdp: TabularMdp,
    state: usize,
    rng: Rng,
    clock: EpisodeClock,
}

impl ChainWalk {
    pub fn new(mdp: TabularMdp) -> Self {
        ChainWalk {
            spec: EnvSpec {
                name: "chain-mdp".into(),
                state_dim: mdp.n_states(),
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 50,
                reward_kind: RewardKind::Dense,
            },
            mdp,
            state: 0,
            rng: rng_from(0, 1),
            clock: EpisodeClock::default(),
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state_index(&self) -> usize {
        self.state
    }

    /// Discrete action selected by a continuous command.
    pub fn discretize(&self, a: f64) -> usize {
        let n = self.mdp.n_actions();
        let bin = ((a.clamp(-1.0, 1.0) + 1.0) / 2.0 * n as f64).floor() as usize;
        bin.min(n - 1)
    }

    /// Continuous command at the centre of a discrete action's bin.
    pub fn action_center(&self, a: usize) -> f64 {
        let n = self.mdp.n_actions() as f64;
        -1.0 + (2.0 * a as f64 + 1.0) / n
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[s] = 1.0;
        v
    }
}

impl Env for ChainWalk {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, 0);
        self.state = sample_index(self.mdp.initial(), rng.random::<f64>());
        self.rng = rng_from(seed, 1);
        self.clock.start();
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        self.clock.check_active()?;
        let clamped = self.clock.clamp(&self.spec, action)?;
        let a = self.discretize(clamped[0]);
        let reward = self.mdp.reward(self.state, a);
        self.state = self.mdp.sample_next(self.state, a, self.rng.random::<f64>());
        let truncated = self.clock.tick(&self.spec, false);
        Ok(StepResult { next_state: self.one_hot(self.state), reward, terminated: false, truncated })
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("chain state serializes")
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
    fn reset_always_starts_at_zero() {
        let mut env = ChainWalk::new(TabularMdp::chain(5, 0.9).unwrap());
        for seed in 0..50 {
            assert_eq!(env.reset(seed), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn actions_map_to_bins() {
        let env = ChainWalk::new(TabularMdp::chain(5, 0.9).unwrap());
        assert_eq!(env.discretize(-1.0), 0);
        assert_eq!(env.discretize(-0.01), 0);
        assert_eq!(env.discretize(0.0), 1);
        assert_eq!(env.discretize(1.0), 1);
        assert_eq!(env.discretize(env.action_center(0)), 0);
        assert_eq!(env.discretize(env.action_center(1)), 1);
    }

    #[test]
    fn walking_right_reaches_the_paying_end() {
        let mut env = ChainWalk::new(TabularMdp::chain(3, 0.9).unwrap());
        env.reset(0);
        let rewards: Vec<f64> = (0..4).map(|_| env.step(&[1.0]).unwrap().reward).collect();
        assert_eq!(rewards, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(env.step(&[-1.0]).unwrap().next_state, vec![1.0, 0.0, 0.0]);
    }
}
