use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvSpec, StepResult};
use crate::numerics::{rng_from, standard_normal, Rng};

/// Executes `clamp(requested + ε)` with `ε ~ N(0, σ²I)` drawn fresh every step.
#[derive(Debug)]
pub struct ActionNoise<E> {
    inner: E,
    sigma: f64,
    rng: Rng,
    last_executed: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NoiseState {
    inner: serde_json::Value,
    sigma: f64,
    rng: Rng,
    last_executed: Vec<f64>,
}

impl<E: Env> ActionNoise<E> {
    pub fn new(inner: E, sigma: f64, seed: u64) -> Result<Self, EnvError> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(EnvError::Invalid(format!("noise scale {sigma} must be a finite non-negative number")));
        }
        Ok(ActionNoise { inner, sigma, rng: rng_from(seed, 0x6e6f697365), last_executed: Vec::new() })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Action actually applied on the most recent step.
    pub fn last_executed(&self) -> &[f64] {
        &self.last_executed
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Env> Env for ActionNoise<E> {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let executed = if self.sigma == 0.0 {
            action.to_vec()
        } else {
            let spec = self.inner.spec();
            if action.len() != spec.action_dim {
                return Err(EnvError::ActionDim { expected: spec.action_dim, got: action.len() });
            }
            let noisy: Vec<f64> = action.iter().map(|a| a + self.sigma * standard_normal(&mut self.rng)).collect();
            spec.clamp_action(&noisy)
        };
        let result = self.inner.step(&executed)?;
        self.last_executed = executed;
        Ok(result)
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(NoiseState {
            inner: self.inner.save_state(),
            sigma: self.sigma,
            rng: self.rng.clone(),
            last_executed: self.last_executed.clone(),
        })
        .expect("noise state serializes")
    }

    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError> {
        let s: NoiseState = serde_json::from_value(state).map_err(|e| EnvError::Restore(e.to_string()))?;
        self.inner.load_state(s.inner)?;
        self.sigma = s.sigma;
        self.rng = s.rng;
        self.last_executed = s.last_executed;
        Ok(())
    }

    fn is_success(&self, reward: f64) -> bool {
        self.inner.is_success(reward)
    }
}
