use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentPlan, HarnessError, RunLog, RUNLOG_VERSION};
use crate::actor::GateMode;
use crate::agent::{checkpoint_save, Agent, AgentError};

/// `1.96·s/√n` with the sample standard deviation; 0 for a single value.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Statistics over seeds at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub env_step: u64,
    pub n: usize,
    pub return_mean: f64,
    pub return_ci: f64,
    pub success_mean: Option<f64>,
    pub success_ci: Option<f64>,
    pub gate_fraction_mean: Option<f64>,
    pub v_pi_mean: Option<f64>,
    pub v_mu_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub env: String,
    pub mode: GateMode,
    pub seeds: Vec<u64>,
    pub completed: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub checkpoints: Vec<CheckpointStats>,
}

impl Summary {
    pub fn last(&self) -> Option<&CheckpointStats> {
        self.checkpoints.last()
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn optional(values: Vec<Option<f64>>) -> Option<Vec<f64>> {
    values.into_iter().collect()
}

/// Per-checkpoint means over logs, at the steps every log reached.
pub fn aggregate(logs: &[&RunLog]) -> Vec<CheckpointStats> {
    let Some(first) = logs.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (i, row) in first.rows.iter().enumerate() {
        let rows: Option<Vec<_>> = logs.iter().map(|l| l.rows.get(i).filter(|r| r.env_step == row.env_step)).collect();
        let Some(rows) = rows else { break };
        let (return_mean, return_ci) = mean_ci(&rows.iter().map(|r| r.eval_return_mean).collect::<Vec<_>>());
        let success = optional(rows.iter().map(|r| r.success_rate).collect()).map(|v| mean_ci(&v));
        let mean_of = |f: fn(&super::RunRow) -> Option<f64>| optional(rows.iter().map(|r| f(r)).collect()).map(|v| mean_ci(&v).0);
        out.push(CheckpointStats {
            env_step: row.env_step,
            n: rows.len(),
            return_mean,
            return_ci,
            success_mean: success.map(|s| s.0),
            success_ci: success.map(|s| s.1),
            gate_fraction_mean: mean_of(|r| r.gate_fraction),
            v_pi_mean: mean_of(|r| r.v_pi_mean),
            v_mu_mean: mean_of(|r| r.v_mu_mean),
        });
    }
    out
}

/// Per-seed results of one experiment in one gate mode.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub logs: Vec<(u64, RunLog)>,
    pub summary: Summary,
}

impl ExperimentOutcome {
    pub fn log(&self, seed: u64) -> Option<&RunLog> {
        self.logs.iter().find(|(s, _)| *s == seed).map(|(_, l)| l)
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    runlog_version: u32,
    plan: &'a ExperimentPlan,
    config: &'a crate::agent::AgentConfig,
    config_hash: String,
    seed: u64,
    mode: GateMode,
    status: &'a str,
    grad_steps: u64,
    gate_audit: &'a crate::agent::GateAudit,
}

/// `<out>/<name>/<mode>/<seed>/`.
pub fn seed_dir(plan: &ExperimentPlan, mode: GateMode, seed: u64) -> PathBuf {
    plan.experiment_dir().join(mode.as_str()).join(seed.to_string())
}

/// Runs every seed of the plan in the plan's own gate mode.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome, HarnessError> {
    run_mode(plan, None)
}

/// Runs every seed in `mode` (or the plan's mode). A seed that fails is
/// recorded in the summary (with `diagnostic.json` for aborted runs); the
/// remaining seeds still run.
pub fn run_mode(plan: &ExperimentPlan, mode: Option<GateMode>) -> Result<ExperimentOutcome, HarnessError> {
    plan.validate()?;
    let mode = match mode {
        Some(m) => m,
        None => plan.mode()?,
    };
    let dir = plan.experiment_dir().join(mode.as_str());
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &plan.seeds {
        match run_seed(plan, mode, seed)? {
            Ok(log) => logs.push((seed, log)),
            Err(error) => failures.push(SeedFailure { seed, error }),
        }
    }
    let refs: Vec<&RunLog> = logs.iter().map(|(_, l)| l).collect();
    let summary = Summary {
        name: plan.name.clone(),
        env: plan.env.clone(),
        mode,
        seeds: plan.seeds.clone(),
        completed: logs.iter().map(|(s, _)| *s).collect(),
        failures,
        checkpoints: aggregate(&refs),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentOutcome { dir, logs, summary })
}

/// Outer error: the harness itself failed. Inner error: the seed's run failed.
fn run_seed(plan: &ExperimentPlan, mode: GateMode, seed: u64) -> Result<Result<RunLog, String>, HarnessError> {
    let config = plan.agent_config(seed, Some(mode))?;
    let dir = seed_dir(plan, mode, seed);
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    log::info!("{} / {} / seed {}: {} steps", plan.name, mode, seed, plan.total_steps);
    let mut agent = Agent::new(config.clone())?;
    let result = agent.run_until(plan.total_steps);
    let status = match &result {
        Ok(()) => "completed".to_string(),
        Err(e) => {
            if let AgentError::Aborted(d) = e {
                std::fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(d)?)?;
            }
            log::error!("seed {seed} failed: {e}");
            format!("failed: {e}")
        }
    };
    agent.log().save(&dir.join("log.csv"), plan.zero_wall_time)?;
    if plan.checkpoint && result.is_ok() {
        checkpoint_save(&agent, &dir.join("checkpoints").join("final.ckpt"))?;
    }
    let meta = Meta {
        runlog_version: RUNLOG_VERSION,
        plan,
        config: &config,
        config_hash: config.hash(),
        seed,
        mode,
        status: &status,
        grad_steps: agent.grad_steps(),
        gate_audit: agent.audit(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(match result {
        Ok(()) => Ok(agent.into_log()),
        Err(e) => Err(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::RunRow;

    fn row(step: u64, ret: f64) -> RunRow {
        RunRow {
            env_step: step,
            wall_ms: 0,
            eval_return_mean: ret,
            eval_return_std: 0.0,
            success_rate: Some(ret / 10.0),
            loss_q_pi: None,
            loss_q_mu: None,
            loss_v_mu: None,
            loss_actor: None,
            alpha: 1.0,
            gate_fraction: None,
            v_pi_mean: None,
            v_mu_mean: None,
            seed: 0,
            run_id: String::new(),
        }
    }

    #[test]
    fn ci_formula() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (m, ci) = mean_ci(&v);
        assert_eq!(m, 3.0);
        assert!((ci - 1.96 * 2.5f64.sqrt() / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_ci(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn aggregate_is_the_arithmetic_mean_over_common_steps() {
        let a = RunLog { rows: vec![row(10, 1.0), row(20, 2.0), row(30, 9.0)] };
        let b = RunLog { rows: vec![row(10, 3.0), row(20, 6.0)] };
        let s = aggregate(&[&a, &b]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].return_mean, 4.0);
        assert_eq!(s[1].success_mean, Some(0.4));
        assert_eq!(s[0].gate_fraction_mean, None);
    }
}
