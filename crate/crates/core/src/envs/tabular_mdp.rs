use serde::{Deserialize, Serialize};

use super::EnvError;

/// Finite MDP `⟨S, A, P, R, γ, d₀⟩` with dense tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened.
    transitions: Vec<f64>,
    /// `R[s][a]`, flattened.
    rewards: Vec<f64>,
    gamma: f64,
    initial: Vec<f64>,
}

const ROW_TOL: f64 = 1e-12;

impl TabularMdp {
    /// `transitions[s][a][s']`, `rewards[s][a]`, initial distribution `initial[s]`.
    pub fn new(
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        initial: Vec<f64>,
    ) -> Result<Self, EnvError> {
        let n_states = transitions.len();
        if n_states == 0 {
            return Err(EnvError::Invalid("MDP needs at least one state".into()));
        }
        let n_actions = transitions[0].len();
        if n_actions == 0 {
            return Err(EnvError::Invalid("MDP needs at least one action".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(EnvError::Invalid(format!("discount {gamma} outside [0, 1)")));
        }
        if rewards.len() != n_states || initial.len() != n_states {
            return Err(EnvError::Invalid("reward table and initial distribution need one entry per state".into()));
        }
        let mut flat_p = Vec::with_capacity(n_states * n_actions * n_states);
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for (s, (rows, r)) in transitions.iter().zip(&rewards).enumerate() {
            if rows.len() != n_actions || r.len() != n_actions {
                return Err(EnvError::Invalid(format!("state {s}: expected {n_actions} actions")));
            }
            for (a, row) in rows.iter().enumerate() {
                check_distribution(row, n_states).map_err(|e| EnvError::Invalid(format!("P[{s}][{a}]: {e}")))?;
                flat_p.extend_from_slice(row);
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(EnvError::Invalid(format!("R[{s}] has non-finite entries")));
            }
            flat_r.extend_from_slice(r);
        }
        check_distribution(&initial, n_states).map_err(|e| EnvError::Invalid(format!("d0: {e}")))?;
        Ok(TabularMdp { n_states, n_actions, transitions: flat_p, rewards: flat_r, gamma, initial })
    }

    /// Chain of `n` states. Action 0 returns to the start with reward 0.2;
    /// action 1 advances one state, and at the last state stays there and
    /// pays 1. Starts in state 0.
    pub fn chain(n: usize, gamma: f64) -> Result<Self, EnvError> {
        if n < 2 {
            return Err(EnvError::Invalid("chain needs at least two states".into()));
        }
        let mut p = vec![vec![vec![0.0; n]; 2]; n];
        let mut r = vec![vec![0.0; 2]; n];
        for s in 0..n {
            p[s][0][0] = 1.0;
            r[s][0] = 0.2;
            p[s][1][(s + 1).min(n - 1)] = 1.0;
            r[s][1] = if s == n - 1 { 1.0 } else { 0.0 };
        }
        let mut d0 = vec![0.0; n];
        d0[0] = 1.0;
        TabularMdp::new(p, r, gamma, d0)
    }

    /// Random MDP: transition rows are normalised exponential draws (a flat
    /// Dirichlet), rewards uniform in `[0, 1)`, uniform start distribution.
    pub fn random<R: rand::Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self, EnvError> {
        let mut p = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        let mut r = vec![vec![0.0; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let draws: Vec<f64> = (0..n_states).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let total: f64 = draws.iter().sum();
                p[s][a] = draws.iter().map(|d| d / total).collect();
                r[s][a] = rng.random::<f64>();
            }
        }
        TabularMdp::new(p, r, gamma, vec![1.0 / n_states as f64; n_states])
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self, EnvError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(EnvError::Invalid(format!("discount {gamma} outside [0, 1)")));
        }
        Ok(TabularMdp { gamma, ..self.clone() })
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    /// Next-state distribution `P[s][a][·]`.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    /// Samples `s' ~ P[s][a]` with a uniform draw `u ∈ [0, 1)`.
    pub fn sample_next(&self, s: usize, a: usize, u: f64) -> usize {
        sample_index(self.next_dist(s, a), u)
    }
}

pub(crate) fn sample_index(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum: take the last supported entry
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

fn check_distribution(row: &[f64], n: usize) -> Result<(), String> {
    if row.len() != n {
        return Err(format!("length {} (expected {n})", row.len()));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err("negative or non-finite probability".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from;

    #[test]
    fn rejects_bad_tables() {
        let ok = vec![vec![vec![1.0]]];
        assert!(TabularMdp::new(ok.clone(), vec![vec![0.0]], 1.0, vec![1.0]).is_err());
        assert!(TabularMdp::new(vec![vec![vec![0.5]]], vec![vec![0.0]], 0.9, vec![1.0]).is_err());
        assert!(TabularMdp::new(vec![vec![vec![1.5, -0.5]]; 2], vec![vec![0.0]; 2], 0.9, vec![1.0, 0.0]).is_err());
        assert!(TabularMdp::new(ok, vec![vec![0.0]], 0.5, vec![1.0]).is_ok());
    }

    #[test]
    fn random_rows_are_distributions() {
        let mut rng = rng_from(1, 0);
        let mdp = TabularMdp::random(7, 3, 0.9, &mut rng).unwrap();
        for s in 0..7 {
            for a in 0..3 {
                let sum: f64 = mdp.next_dist(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn chain_structure() {
        let mdp = TabularMdp::chain(3, 0.9).unwrap();
        assert_eq!(mdp.next_dist(1, 1), &[0.0, 0.0, 1.0]);
        assert_eq!(mdp.next_dist(2, 1), &[0.0, 0.0, 1.0]);
        assert_eq!(mdp.next_dist(2, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(mdp.reward(2, 1), 1.0);
        assert_eq!(mdp.reward(0, 0), 0.2);
    }
}
