use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    exact_policy_evaluation, fitted_offline_values, offline_optimal, value_iteration, TabularDataset, TabularError,
    TabularPolicy,
};
use crate::envs::{sample_index, TabularMdp};
use crate::numerics::rng_from;

/// Values at one checkpoint of the concurrent study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcurrentCheckpoint {
    /// Transitions collected so far.
    pub transitions: usize,
    /// A reachable state without dataset actions, if any; the offline values
    /// are then not defined and the probes are all skipped.
    pub coverage_gap: Option<usize>,
    pub probes: Vec<usize>,
    /// `V^μ*` at each probe; `None` for skipped probes.
    pub v_mu: Vec<Option<f64>>,
    pub v_pi: Vec<f64>,
    pub v_star: Vec<f64>,
    /// `V^μ*(s) ≥ V^π(s)` at each probe that was not skipped.
    pub offline_dominates: Vec<Option<bool>>,
    /// Probe states without dataset actions.
    pub skipped: Vec<usize>,
    /// Tabular expectile fixed point of the offline learner at each probe.
    pub v_expectile: Vec<Option<f64>>,
}

/// The online agent acts with `behaviour` (restarting from the start
/// distribution every `horizon` steps) and never consults the offline
/// learner; at each checkpoint the buffer's offline optimum `V^μ*` and the
/// behaviour's own `V^π` are computed exactly on `probes`, together with the
/// τ-expectile fixed point a neural offline learner would approximate.
pub fn motivating_example_concurrent(
    mdp: &TabularMdp,
    behaviour: &TabularPolicy,
    checkpoints: &[usize],
    probes: &[usize],
    horizon: usize,
    tau: f64,
    seed: u64,
) -> Result<Vec<ConcurrentCheckpoint>, TabularError> {
    if horizon == 0 {
        return Err(TabularError::Dataset("horizon must be positive".into()));
    }
    if let Some(&p) = probes.iter().find(|&&p| p >= mdp.n_states()) {
        return Err(TabularError::Dataset(format!("probe state {p} out of range")));
    }
    let online = exact_policy_evaluation(mdp, behaviour)?;
    let star = value_iteration(mdp, 1e-12)?;
    let mut rng = rng_from(seed, 0);
    let mut dataset = TabularDataset::empty(mdp.n_states(), mdp.n_actions());
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut collected = 0;
    let mut s = sample_index(mdp.initial(), rng.random());
    for &target in checkpoints {
        while collected < target {
            if collected > 0 && collected % horizon == 0 {
                s = sample_index(mdp.initial(), rng.random());
            }
            let a = sample_index(behaviour.probs().row(s).as_slice().unwrap(), rng.random());
            dataset.add(s, a)?;
            s = mdp.sample_next(s, a, rng.random());
            collected += 1;
        }
        let v_pi = probes.iter().map(|&p| online.v[p]).collect();
        let v_star = probes.iter().map(|&p| star.v[p]).collect();
        let skipped: Vec<usize> = probes.iter().copied().filter(|&p| !dataset.is_covered(p)).collect();
        let (coverage_gap, v_mu, v_expectile) = match offline_optimal(mdp, &dataset) {
            Ok(off) => {
                let (_, fitted) = fitted_offline_values(mdp, &dataset, tau, 1e-12)?;
                let pick = |v: &ndarray::Array1<f64>| -> Vec<Option<f64>> {
                    probes.iter().map(|&p| dataset.is_covered(p).then(|| v[p])).collect()
                };
                (None, pick(&off.v), pick(&fitted))
            }
            Err(TabularError::Coverage { state }) => (Some(state), vec![None; probes.len()], vec![None; probes.len()]),
            Err(e) => return Err(e),
        };
        let offline_dominates =
            v_mu.iter().zip(probes).map(|(m, &p)| m.map(|m: f64| m >= online.v[p] - 1e-12)).collect();
        out.push(ConcurrentCheckpoint {
            transitions: collected,
            coverage_gap,
            probes: probes.to_vec(),
            v_mu,
            v_pi,
            v_star,
            offline_dominates,
            skipped,
            v_expectile,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_actor_on_the_chain_is_dominated_after_coverage() {
        let mdp = TabularMdp::chain(5, 0.9).unwrap();
        let uniform = TabularPolicy::uniform(5, mdp.n_actions());
        let probes: Vec<usize> = (0..5).collect();
        let trace = motivating_example_concurrent(&mdp, &uniform, &[5, 20_000], &probes, 50, 0.999, 3).unwrap();
        let last = trace.last().unwrap();
        assert_eq!(last.coverage_gap, None);
        for (i, &p) in probes.iter().enumerate() {
            let v_mu = last.v_mu[i].unwrap();
            assert!((v_mu - last.v_star[i]).abs() < 1e-9, "state {p}");
            assert!(last.v_pi[i] < last.v_star[i]);
            assert_eq!(last.offline_dominates[i], Some(true));
            assert!((last.v_expectile[i].unwrap() - v_mu).abs() < 0.1);
        }
    }

    #[test]
    fn optimal_rollouts_give_the_optimal_value() {
        let mdp = TabularMdp::chain(4, 0.9).unwrap();
        let star = value_iteration(&mdp, 1e-12).unwrap();
        let trace = motivating_example_concurrent(&mdp, &star.policy, &[200], &[0, 1, 2, 3], 10, 0.9, 0).unwrap();
        for i in 0..4 {
            assert!((trace[0].v_mu[i].unwrap() - trace[0].v_pi[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn uncovered_probes_are_skipped() {
        let mdp = TabularMdp::chain(6, 0.9).unwrap();
        // always stepping left never leaves state 0
        let left = TabularPolicy::deterministic(&[0; 6], mdp.n_actions());
        let trace = motivating_example_concurrent(&mdp, &left, &[30], &[0, 5], 10, 0.9, 1).unwrap();
        assert_eq!(trace[0].skipped, vec![5]);
        assert_eq!(trace[0].v_mu[1], None);
        assert!(trace[0].v_mu[0].is_some());
    }
}
