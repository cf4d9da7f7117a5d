use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::actor::GateMode;
use crate::agent::{config_validate, AgentConfig};

/// One experiment: an environment, agent overrides and a seed list.
///
/// ```toml
/// name = "pendulum-desk"
/// env = "pendulum"
/// action_noise = 0.0
/// seeds = [0, 1, 2, 3, 4]
/// total_steps = 30000
/// out = "runs"
/// zero_wall_time = false
///
/// [agent]          # any agent configuration key except the four above
/// hidden = [64, 64]
/// batch_size = 128
/// ```
///
/// Sparse rewards are selected through the environment name
/// (`pointmass-sparse`). Unknown keys, here and in `[agent]`, are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub env: String,
    #[serde(default)]
    pub action_noise: f64,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub agent: toml::Table,
    /// Save a final checkpoint for every seed.
    #[serde(default = "yes")]
    pub checkpoint: bool,
    /// Write `wall_ms` as 0 so that reruns give byte-identical CSVs.
    #[serde(default)]
    pub zero_wall_time: bool,
}

fn yes() -> bool {
    true
}

const PLAN_LEVEL: [&str; 4] = ["env", "seed", "total_steps", "action_noise"];

impl ExperimentPlan {
    pub fn new(name: &str, env: &str, seeds: Vec<u64>, total_steps: u64, out: &Path) -> Self {
        ExperimentPlan {
            name: name.into(),
            env: env.into(),
            action_noise: 0.0,
            seeds,
            total_steps,
            out: out.to_path_buf(),
            agent: toml::Table::new(),
            checkpoint: true,
            zero_wall_time: false,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let plan: Self = toml::from_str(text).map_err(|e| HarnessError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Sets an agent override from any serialisable value.
    pub fn set<T: Serialize>(&mut self, key: &str, value: T) -> Result<(), HarnessError> {
        let v = toml::Value::try_from(value).map_err(|e| HarnessError::Plan(e.to_string()))?;
        self.agent.insert(key.to_string(), v);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.name.is_empty() || self.name.contains(['\\']) || self.name.split('/').any(|p| p.is_empty() || p == "..") {
            return Err(HarnessError::Plan(format!("invalid experiment name {:?}", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Plan("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Plan(format!("seeds must be distinct: {:?}", self.seeds)));
        }
        if let Some(k) = PLAN_LEVEL.iter().find(|k| self.agent.contains_key(**k)) {
            return Err(HarnessError::Plan(format!("`{k}` is a plan-level field, not an agent override")));
        }
        self.agent_config(self.seeds[0], None)?;
        Ok(())
    }

    /// The validated agent configuration for one seed, optionally forcing a gate mode.
    pub fn agent_config(&self, seed: u64, mode: Option<GateMode>) -> Result<AgentConfig, HarnessError> {
        let mut table = self.agent.clone();
        table.insert("env".into(), toml::Value::String(self.env.clone()));
        table.insert("action_noise".into(), toml::Value::Float(self.action_noise));
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        table.insert("total_steps".into(), toml::Value::Integer(self.total_steps as i64));
        if let Some(m) = mode {
            table.insert("gate".into(), toml::Value::String(m.as_str().into()));
        }
        Ok(config_validate(&table)?)
    }

    /// Gate mode used when none is forced.
    pub fn mode(&self) -> Result<GateMode, HarnessError> {
        Ok(self.agent_config(self.seeds[0], None)?.gate)
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }
}
