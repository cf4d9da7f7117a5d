//! The tabular property suite behind `obac tabular-verify`.

use rand::Rng as _;
use serde::Serialize;

use crate::actor::GateMode;
use crate::envs::TabularMdp;
use crate::numerics::{rng_from, Rng};
use crate::tabular::{
    apply_bellman, closed_form_improvement, expectile_of_set, kl_divergence,
    motivating_example_concurrent, offline_boosted_policy_iteration, solve_constrained_program, sup_distance,
    total_variation, value_iteration, DatasetGrowth, GreedyBranch, TabularDataset, TabularError, TabularPolicy,
    TraceStep,
};

/// One checked property: the worst measured value against its bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub bound: f64,
    pub passed: bool,
    /// Whether a failure fails the suite; informational checks only report.
    pub enforced: bool,
    pub detail: String,
}

impl std::fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {} ({} instances): worst {:.3e}, bound {:.3e}{}",
            match (self.passed, self.enforced) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "NOTE",
            },
            self.name,
            self.instances,
            self.worst,
            self.bound,
            if self.detail.is_empty() { String::new() } else { format!("; {}", self.detail) }
        )
    }
}

/// Random stochastic policy with Dirichlet(1) rows.
pub fn random_policy(n_states: usize, n_actions: usize, rng: &mut Rng) -> TabularPolicy {
    let mut p = ndarray::Array2::from_shape_fn((n_states, n_actions), |_| -(1.0 - rng.random::<f64>()).ln());
    for mut row in p.rows_mut() {
        let z = row.sum();
        row /= z;
    }
    TabularPolicy::new(p).expect("normalised rows")
}

/// Random MDP of the property family: `|S| ∈ [2, 10]`, `|A| ∈ [2, 5]`, `γ ∈ [0.5, 0.95)`.
pub fn random_instance(rng: &mut Rng) -> TabularMdp {
    let ns = rng.random_range(2..=10);
    let na = rng.random_range(2..=5);
    let gamma = rng.random_range(0.5..0.95);
    TabularMdp::random(ns, na, gamma, rng).expect("valid random MDP")
}

/// `T^π` contracts the sup-norm distance of random Q-table pairs by at most `γ`.
pub fn check_contraction(instances: usize, seed: u64) -> Result<PropertyResult, TabularError> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..instances {
        let mut rng = rng_from(seed, i as u64);
        let mdp = random_instance(&mut rng);
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let pi = random_policy(ns, na, &mut rng);
        let q1 = ndarray::Array2::from_shape_fn((ns, na), |_| rng.random_range(-10.0..10.0));
        let q2 = ndarray::Array2::from_shape_fn((ns, na), |_| rng.random_range(-10.0..10.0));
        let ratio = sup_distance(&apply_bellman(&mdp, &pi, &q1)?, &apply_bellman(&mdp, &pi, &q2)?) / sup_distance(&q1, &q2);
        worst = worst.max(ratio - mdp.gamma());
    }
    Ok(PropertyResult {
        name: "contraction ratio − γ".into(),
        instances,
        worst,
        bound: 1e-12,
        passed: worst <= 1e-12,
        enforced: true,
        detail: String::new(),
    })
}

/// Offline-boosted policy iteration on a random MDP with a dataset that
/// starts with one random action per state and grows with rollouts.
pub fn growing_trace(seed: u64, iterations: usize) -> Result<(TabularMdp, Vec<TraceStep>), TabularError> {
    let mut rng = rng_from(seed, 0);
    let mdp = random_instance(&mut rng);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let pi0 = random_policy(ns, na, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..ns).map(|s| (s, rng.random_range(0..na))).collect();
    let data = TabularDataset::from_pairs(ns, na, &pairs)?;
    let beta = rng.random_range(0.5..5.0);
    let growth = DatasetGrowth::Rollouts { episodes: 2, horizon: 8, seed: rng.random() };
    let trace = offline_boosted_policy_iteration(&mdp, &pi0, &data, growth, beta, GateMode::Adaptive, iterations)?;
    Ok((mdp, trace))
}

/// Largest drop `Q^{π_k} − Q^{π_{k+1}}` over dataset pairs, and the largest
/// violation of `E_{π_{k+1}}[Q^{π_k}(s,·)] ≥ V^{π_k}(s)` at gated states.
pub fn monotonicity_gaps(trace: &[TraceStep]) -> (f64, f64, usize) {
    let mut drop = f64::NEG_INFINITY;
    let mut chain = f64::NEG_INFINITY;
    let mut chain_violations = 0;
    for w in trace.windows(2) {
        let (k, next) = (&w[0], &w[1]);
        for (s, a) in k.dataset.pairs() {
            drop = drop.max(k.eval.q[[s, a]] - next.eval.q[[s, a]]);
        }
        for (s, &g) in k.gate.iter().enumerate() {
            if !g {
                continue;
            }
            let expected: f64 = (0..k.eval.q.ncols()).map(|a| next.policy.prob(s, a) * k.eval.q[[s, a]]).sum();
            let gap = k.eval.v[s] - expected;
            chain = chain.max(gap);
            if gap > 1e-10 {
                chain_violations += 1;
            }
        }
    }
    (drop, chain, chain_violations)
}

pub fn check_monotonicity(instances: usize, seed: u64) -> Result<Vec<PropertyResult>, TabularError> {
    let mut worst = f64::NEG_INFINITY;
    let mut chain = f64::NEG_INFINITY;
    let mut violations = 0;
    for i in 0..instances {
        let (_, trace) = growing_trace(seed.wrapping_add(i as u64), 10)?;
        let (d, c, v) = monotonicity_gaps(&trace);
        worst = worst.max(d);
        chain = chain.max(c);
        violations += v;
    }
    Ok(vec![
        PropertyResult {
            name: "monotone improvement: max Q drop on dataset pairs".into(),
            instances,
            worst,
            bound: 1e-10,
            passed: worst <= 1e-10,
            enforced: true,
            detail: String::new(),
        },
        // V^μ*(s) ≥ V^π_k(s) does not imply E_μ*[Q^π_k(s,·)] ≥ V^π_k(s), so this
        // one-step bound can fail while the Q-monotonicity above still holds
        PropertyResult {
            name: "one-step chain at gated states: max V^π_k − E_π_{k+1} Q^π_k".into(),
            instances,
            worst: chain,
            bound: 1e-10,
            passed: chain <= 1e-10,
            enforced: false,
            detail: format!("{violations} gated states violate it"),
        },
    ])
}

pub fn check_convergence(instances: usize, seed: u64) -> Result<PropertyResult, TabularError> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..instances {
        let mut rng = rng_from(seed.wrapping_add(i as u64), 0);
        let mdp = random_instance(&mut rng);
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let pi0 = random_policy(ns, na, &mut rng);
        let beta = rng.random_range(0.5..5.0);
        let full = TabularDataset::full(ns, na);
        let trace = offline_boosted_policy_iteration(&mdp, &pi0, &full, DatasetGrowth::Static, beta, GateMode::Adaptive, 50)?;
        let star = value_iteration(&mdp, 1e-13)?;
        worst = worst.max(sup_distance(&trace.last().unwrap().eval.q, &star.q));
    }
    Ok(PropertyResult {
        name: "convergence: sup |Q_final − Q*| with full coverage".into(),
        instances,
        worst,
        bound: 1e-8,
        passed: worst < 1e-8,
        enforced: true,
        detail: String::new(),
    })
}

/// Closed form against a numerical solve of the KL-constrained program at
/// the constraint level the closed form attains.
pub fn check_closed_form(instances: usize, seed: u64) -> Result<PropertyResult, TabularError> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..instances {
        let mut rng = rng_from(seed, 1000 + i as u64);
        let na = rng.random_range(2..=6);
        let mu = random_policy(1, na, &mut rng);
        let q = ndarray::Array2::from_shape_fn((1, na), |_| rng.random_range(-2.0..2.0));
        let beta = rng.random_range(0.2..3.0);
        let closed = closed_form_improvement(&mu, &q, beta, &[true], GreedyBranch::Argmax)?;
        let p: Vec<f64> = closed.probs().row(0).to_vec();
        let m: Vec<f64> = mu.probs().row(0).to_vec();
        let eps = kl_divergence(&p, &m);
        let solved = solve_constrained_program(&m, q.row(0).as_slice().unwrap(), eps)?;
        worst = worst.max(total_variation(&p, &solved));
    }
    Ok(PropertyResult {
        name: "closed form vs constrained solve: total variation".into(),
        instances,
        worst,
        bound: 1e-6,
        passed: worst < 1e-6,
        enforced: true,
        detail: String::new(),
    })
}

pub fn check_expectiles() -> Result<PropertyResult, TabularError> {
    let cases = [(vec![0.0, 1.0], 0.9, 0.9, 1e-9), (vec![0.0, 1.0, 5.0], 0.999, 5.0, 1e-2), (vec![1.0, 2.0, 6.0], 0.5, 3.0, 1e-9)];
    let mut worst = 0.0f64;
    for (values, tau, expected, tol) in cases {
        worst = worst.max((expectile_of_set(&values, tau)? - expected).abs() / tol);
    }
    Ok(PropertyResult {
        name: "expectile examples: error / tolerance".into(),
        instances: 3,
        worst,
        bound: 1.0,
        passed: worst <= 1.0,
        enforced: true,
        detail: String::new(),
    })
}

pub fn check_motivating_chain(seed: u64) -> Result<PropertyResult, TabularError> {
    let mdp = TabularMdp::chain(5, 0.9)?;
    let uniform = TabularPolicy::uniform(5, mdp.n_actions());
    let probes: Vec<usize> = (0..5).collect();
    let trace = motivating_example_concurrent(&mdp, &uniform, &[20_000], &probes, 50, 0.99, seed)?;
    let last = &trace[0];
    let mut worst = 0.0f64;
    let mut dominated = true;
    for i in 0..probes.len() {
        match last.v_mu[i] {
            Some(v) => {
                worst = worst.max((v - last.v_star[i]).abs());
                dominated &= last.offline_dominates[i] == Some(true) && last.v_pi[i] < last.v_star[i];
            }
            None => dominated = false,
        }
    }
    Ok(PropertyResult {
        name: "chain, uniform actor: |V^μ* − V*| at probes".into(),
        instances: 1,
        worst,
        bound: 1e-9,
        passed: worst < 1e-9 && dominated,
        enforced: true,
        detail: format!("offline dominates at every probe: {dominated}"),
    })
}

/// The complete suite.
pub fn tabular_verify(seed: u64) -> Result<Vec<PropertyResult>, TabularError> {
    let mut out = vec![check_contraction(100, seed)?];
    out.extend(check_monotonicity(50, seed)?);
    out.push(check_convergence(50, seed)?);
    out.push(check_closed_form(20, seed)?);
    out.push(check_expectiles()?);
    out.push(check_motivating_chain(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_policies_are_valid() {
        let mut rng = rng_from(0, 0);
        let p = random_policy(4, 3, &mut rng);
        assert!(p.probs().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn small_suite_runs() {
        assert!(check_contraction(5, 1).unwrap().passed);
        assert!(check_closed_form(3, 1).unwrap().passed);
        assert!(check_expectiles().unwrap().passed);
    }
}
