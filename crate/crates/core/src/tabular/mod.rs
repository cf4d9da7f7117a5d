//! Exact finite-MDP counterparts of the learners, used as oracles:
//! policy evaluation, value and policy iteration, dataset-restricted offline
//! optimal policies, the constrained closed-form improvement and the
//! offline-boosted policy iteration built from them.
//!
//! # Problem files
//!
//! A problem is a TOML document:
//!
//! ```toml
//! gamma = 0.9
//! initial = [1.0, 0.0]
//! # rewards[s][a]
//! rewards = [[0.0, 1.0], [0.5, 0.0]]
//! # transitions[s][a][s']
//! transitions = [[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [1.0, 0.0]]]
//! # optional (state, action) pairs, repeated pairs count twice
//! dataset = [[0, 1], [1, 0], [1, 0]]
//! ```
//!
//! Unknown keys are rejected.

mod dp;
mod improvement;
mod motivating;

pub use dp::{
    apply_bellman, exact_policy_evaluation, policy_iteration, sup_distance, value_iteration, Evaluation,
    OptimalValues,
};
pub use improvement::{
    closed_form_improvement, expectile_of_set, expectile_of_weighted_set, fitted_offline_values, kl_divergence,
    offline_boosted_policy_iteration, offline_optimal, offline_optimal_policy, solve_constrained_program,
    total_variation, DatasetGrowth, GreedyBranch, OfflineOptimal, TraceStep,
};
pub use motivating::{motivating_example_concurrent, ConcurrentCheckpoint};

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, TabularMdp};

pub const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error(transparent)]
    Mdp(#[from] EnvError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("state {state} is reachable but has no dataset actions")]
    Coverage { state: usize },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("problem file: {0}")]
    Format(String),
    #[error("problem file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-state action distribution, rows summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self, TabularError> {
        for (s, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(TabularError::Policy(format!("state {s}: negative or non-finite probability")));
            }
            let total: f64 = row.sum();
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(TabularError::Policy(format!("state {s}: probabilities sum to {total}")));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    /// Mass one on `actions[s]` at every state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        TabularPolicy { probs }
    }

    /// Greedy in `q` with ties to the lowest action index.
    pub fn greedy(q: &Array2<f64>) -> Self {
        let actions: Vec<usize> = q.rows().into_iter().map(|row| argmax(row.iter().copied())).collect();
        Self::deterministic(&actions, q.ncols())
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<(), TabularError> {
        if self.probs.dim() != (mdp.n_states(), mdp.n_actions()) {
            return Err(TabularError::Policy(format!(
                "policy shape {:?} does not match MDP ({}, {})",
                self.probs.dim(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// State-action visitation counts of a replay dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    counts: Array2<u64>,
}

impl TabularDataset {
    pub fn empty(n_states: usize, n_actions: usize) -> Self {
        TabularDataset { counts: Array2::zeros((n_states, n_actions)) }
    }

    pub fn from_pairs(n_states: usize, n_actions: usize, pairs: &[(usize, usize)]) -> Result<Self, TabularError> {
        let mut d = Self::empty(n_states, n_actions);
        for &(s, a) in pairs {
            d.add(s, a)?;
        }
        Ok(d)
    }

    /// Every action at every state, once.
    pub fn full(n_states: usize, n_actions: usize) -> Self {
        TabularDataset { counts: Array2::ones((n_states, n_actions)) }
    }

    pub fn add(&mut self, s: usize, a: usize) -> Result<(), TabularError> {
        let (ns, na) = self.counts.dim();
        if s >= ns || a >= na {
            return Err(TabularError::Dataset(format!("pair ({s}, {a}) outside {ns} states × {na} actions")));
        }
        self.counts[[s, a]] += 1;
        Ok(())
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[[s, a]]
    }

    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.counts[[s, a]] > 0
    }

    /// Actions present at `s`, ascending.
    pub fn support(&self, s: usize) -> Vec<usize> {
        (0..self.counts.ncols()).filter(|&a| self.counts[[s, a]] > 0).collect()
    }

    pub fn is_covered(&self, s: usize) -> bool {
        self.counts.row(s).iter().any(|&c| c > 0)
    }

    pub fn visits(&self, s: usize) -> u64 {
        self.counts.row(s).sum()
    }

    /// Empirical action frequencies at a covered state.
    pub fn frequencies(&self, s: usize) -> Option<Vec<f64>> {
        let n = self.visits(s);
        (n > 0).then(|| self.counts.row(s).iter().map(|&c| c as f64 / n as f64).collect())
    }

    pub fn n_states(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.counts.ncols()
    }

    /// All `(s, a)` with a positive count.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.counts.indexed_iter().filter(|(_, &c)| c > 0).map(|(ix, _)| ix).collect()
    }

    pub fn covers_everything(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }
}

/// An MDP with an optional dataset, as read from a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub gamma: f64,
    pub initial: Vec<f64>,
    pub rewards: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub dataset: Vec<[usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct TabularProblem {
    pub mdp: TabularMdp,
    pub dataset: TabularDataset,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, TabularError> {
        toml::from_str(text).map_err(|e| TabularError::Format(e.to_string()))
    }

    pub fn into_problem(self) -> Result<TabularProblem, TabularError> {
        let mdp = TabularMdp::new(self.transitions, self.rewards, self.gamma, self.initial)?;
        let pairs: Vec<(usize, usize)> = self.dataset.iter().map(|p| (p[0], p[1])).collect();
        let dataset = TabularDataset::from_pairs(mdp.n_states(), mdp.n_actions(), &pairs)?;
        Ok(TabularProblem { mdp, dataset })
    }
}

impl TabularProblem {
    pub fn load(path: &Path) -> Result<Self, TabularError> {
        ProblemFile::parse(&std::fs::read_to_string(path)?)?.into_problem()
    }
}
