//! Experiment plumbing: run logs, plans, multi-seed runs, ablation and
//! noise suites, the motivating study, learning-curve export and the tabular
//! property suite.
//!
//! A plan writes `<out>/<name>/<mode>/<seed>/{log.csv, meta.json,
//! checkpoints/final.ckpt}` for every seed and `<out>/<name>/<mode>/summary.json`
//! aggregating them (mean and `1.96·s/√n` over completed seeds).

mod curves;
mod experiment;
mod plan;
mod runlog;
mod suites;
pub mod verify;

pub use curves::{emit_learning_curves, CurveMetric};
pub use experiment::{
    aggregate, mean_ci, run_experiment, run_mode, seed_dir, CheckpointStats, ExperimentOutcome, SeedFailure, Summary,
};
pub use plan::ExperimentPlan;
pub use runlog::{RunLog, RunRow, RUNLOG_HEADER, RUNLOG_VERSION};
pub use suites::{
    decline_rate, decline_table, dominance_windows, run_ablation_suite, run_motivating_example, run_noise_suite,
    run_tabular_motivating, AblationReport, MotivatingReport, NoiseReport, NoiseRow,
};

use thiserror::Error;

use crate::agent::{AgentError, ConfigError};
use crate::envs::EnvError;
use crate::tabular::TabularError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error("offline learner influenced the online run for seed {0}")]
    Isolation(u64),
    #[error("run log: {0}")]
    Log(String),
    #[error("missing: {0}")]
    Missing(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
