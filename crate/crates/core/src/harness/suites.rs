use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{run_mode, ExperimentOutcome, ExperimentPlan, HarnessError, RunLog, Summary};
use crate::actor::GateMode;
use crate::agent::{Agent, PolicyVariant};
use crate::envs::{make_env, RewardKind};
use crate::tabular::{motivating_example_concurrent, ConcurrentCheckpoint, TabularPolicy};

/// The three gate modes run with shared seeds and environment streams.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub modes: Vec<(GateMode, Summary)>,
    pub table: PathBuf,
}

/// Runs adaptive, fixed_on and off on the same seeds and writes
/// `<out>/<name>/ablation.csv` (one row per mode and checkpoint).
pub fn run_ablation_suite(base: &ExperimentPlan) -> Result<AblationReport, HarnessError> {
    let mut modes = Vec::new();
    for mode in GateMode::ALL {
        modes.push((mode, run_mode(base, Some(mode))?.summary));
    }
    let table = base.experiment_dir().join("ablation.csv");
    let mut w = csv::Writer::from_path(&table)?;
    w.write_record(["mode", "env_step", "return_mean", "return_ci", "success_mean", "success_ci", "gate_fraction_mean"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (mode, summary) in &modes {
        for c in &summary.checkpoints {
            w.write_record([
                mode.as_str().to_string(),
                c.env_step.to_string(),
                c.return_mean.to_string(),
                c.return_ci.to_string(),
                opt(c.success_mean),
                opt(c.success_ci),
                opt(c.gate_fraction_mean),
            ])?;
        }
    }
    w.flush()?;
    Ok(AblationReport { modes, table })
}

/// `(p₀ − p)/p₀`, undefined unless `p₀ > 0`.
pub fn decline_rate(perf_clean: f64, perf: f64) -> Option<f64> {
    (perf_clean > 0.0).then(|| (perf_clean - perf) / perf_clean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// `obac` (adaptive gate) or `sac` (gate off).
    pub variant: String,
    pub sigma: f64,
    /// Final success rate on sparse tasks, final return otherwise.
    pub perf: f64,
    pub decline_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub metric: String,
    pub rows: Vec<NoiseRow>,
}

/// Builds the decline-rate table from final performances per `(variant, σ)`;
/// each variant's `σ = 0` entry is the reference.
pub fn decline_table(metric: &str, perfs: &[(String, f64, f64)]) -> Result<NoiseReport, HarnessError> {
    let mut rows = Vec::new();
    for (variant, sigma, perf) in perfs {
        let clean = perfs
            .iter()
            .find(|(v, s, _)| v == variant && *s == 0.0)
            .ok_or_else(|| HarnessError::Plan(format!("variant {variant} has no σ = 0 run")))?
            .2;
        rows.push(NoiseRow { variant: variant.clone(), sigma: *sigma, perf: *perf, decline_rate: decline_rate(clean, *perf) });
    }
    Ok(NoiseReport { metric: metric.into(), rows })
}

impl NoiseReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "sigma", self.metric.as_str(), "decline_rate"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.sigma.to_string(),
                r.perf.to_string(),
                r.decline_rate.map(|d| d.to_string()).unwrap_or_else(|| "undefined".into()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains OBAC and the SAC reduction under each action-noise level and
/// writes `<out>/<name>/noise.csv` and `noise.json`.
pub fn run_noise_suite(base: &ExperimentPlan, sigmas: &[f64]) -> Result<NoiseReport, HarnessError> {
    if !sigmas.contains(&0.0) {
        return Err(HarnessError::Plan("the σ list must include 0".into()));
    }
    let sparse = make_env(&base.env, 0)?.spec().reward_kind == RewardKind::Sparse;
    let mut perfs = Vec::new();
    for &sigma in sigmas {
        let mut plan = base.clone();
        plan.action_noise = sigma;
        plan.name = format!("{}/sigma-{sigma}", base.name);
        for (variant, mode) in [("obac", GateMode::Adaptive), ("sac", GateMode::Off)] {
            let outcome = run_mode(&plan, Some(mode))?;
            let last = outcome
                .summary
                .last()
                .ok_or_else(|| HarnessError::Missing(format!("no completed evaluation for {variant} at σ = {sigma}")))?;
            let perf = if sparse { last.success_mean.unwrap_or(0.0) } else { last.return_mean };
            perfs.push((variant.to_string(), sigma, perf));
        }
    }
    let report = decline_table(if sparse { "success_rate" } else { "return" }, &perfs)?;
    let dir = base.experiment_dir();
    report.write_csv(&dir.join("noise.csv"))?;
    std::fs::write(dir.join("noise.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Neural motivating study: the SAC reduction trains while the offline pair
/// fits its buffer.
#[derive(Debug, Clone)]
pub struct MotivatingReport {
    pub outcome: ExperimentOutcome,
    /// Per seed, maximal runs of consecutive log rows with `v_mu_mean > v_pi_mean`,
    /// as `(first env_step, last env_step)`.
    pub windows: Vec<(u64, Vec<(u64, u64)>)>,
    /// Seeds whose run was repeated without the offline learner and matched
    /// in every parameter and evaluation.
    pub isolation_verified: Vec<u64>,
}

/// Contiguous stretches of rows where the offline value exceeds the online one.
pub fn dominance_windows(log: &RunLog) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut open: Option<(u64, u64)> = None;
    for r in &log.rows {
        let above = matches!((r.v_mu_mean, r.v_pi_mean), (Some(m), Some(p)) if m > p);
        open = match (open, above) {
            (Some((a, _)), true) => Some((a, r.env_step)),
            (None, true) => Some((r.env_step, r.env_step)),
            (Some(w), false) => {
                out.push(w);
                None
            }
            (None, false) => None,
        };
    }
    out.extend(open);
    out
}

/// With `verify_isolation`, every seed is rerun with the offline learner
/// disabled; the policy and all evaluations must match bit for bit, so no
/// offline output can have reached the environment.
pub fn run_motivating_example(plan: &ExperimentPlan, verify_isolation: bool) -> Result<MotivatingReport, HarnessError> {
    let mut plan = plan.clone();
    plan.set("train_offline", true)?;
    plan.set("policy", PolicyVariant::Stochastic)?;
    let outcome = run_mode(&plan, Some(GateMode::Off))?;
    let windows = outcome.logs.iter().map(|(s, l)| (*s, dominance_windows(l))).collect();
    let mut isolation_verified = Vec::new();
    if verify_isolation {
        for (seed, log) in &outcome.logs {
            let mut with = plan.agent_config(*seed, Some(GateMode::Off))?;
            with.train_offline = false;
            let mut twin = Agent::new(with)?;
            twin.run_until(plan.total_steps)?;
            let same_evals = twin.log().rows.iter().zip(&log.rows).all(|(a, b)| a.eval_return_mean == b.eval_return_mean)
                && twin.log().rows.len() == log.rows.len();
            let ckpt = super::seed_dir(&plan, GateMode::Off, *seed).join("checkpoints").join("final.ckpt");
            let same_policy = if ckpt.exists() {
                let original = crate::agent::checkpoint_load(&ckpt, None)?;
                original.learners().policy == twin.learners().policy
            } else {
                true
            };
            if !(same_evals && same_policy) {
                return Err(HarnessError::Isolation(*seed));
            }
            isolation_verified.push(*seed);
        }
    }
    Ok(MotivatingReport { outcome, windows, isolation_verified })
}

/// Tabular motivating study on the chain: a uniform-random online actor and
/// the exact offline optimum of its growing buffer.
pub fn run_tabular_motivating(
    n_states: usize,
    checkpoints: &[usize],
    tau: f64,
    seed: u64,
) -> Result<Vec<ConcurrentCheckpoint>, HarnessError> {
    let mdp = crate::envs::TabularMdp::chain(n_states, 0.9)?;
    let uniform = TabularPolicy::uniform(n_states, mdp.n_actions());
    let probes: Vec<usize> = (0..n_states).collect();
    Ok(motivating_example_concurrent(&mdp, &uniform, checkpoints, &probes, 50, tau, seed)?)
}
