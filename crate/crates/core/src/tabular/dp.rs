use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use super::{TabularError, TabularPolicy};
use crate::envs::TabularMdp;

/// `Q^π` and `V^π` of a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub q: Array2<f64>,
    pub v: Array1<f64>,
}

/// `Q*`, `V*` and a greedy optimal policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalValues {
    pub q: Array2<f64>,
    pub v: Array1<f64>,
    pub policy: TabularPolicy,
    pub iterations: usize,
}

/// `R(s,a) + γ Σ_{s'} P(s'|s,a) v(s')` for every pair.
fn backup(mdp: &TabularMdp, v: &Array1<f64>) -> Array2<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    Array2::from_shape_fn((ns, na), |(s, a)| {
        let next: f64 = mdp.next_dist(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
        mdp.reward(s, a) + mdp.gamma() * next
    })
}

fn expected_under(policy: &TabularPolicy, q: &Array2<f64>) -> Array1<f64> {
    (policy.probs() * q).sum_axis(ndarray::Axis(1))
}

/// Exact `(Q^π, V^π)` from the linear system `(I − γP_π)V = r_π`.
pub fn exact_policy_evaluation(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Evaluation, TabularError> {
    policy.check_shape(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    if !(0.0..1.0).contains(&gamma) {
        return Err(TabularError::Numeric(format!("discount {gamma} must lie in [0, 1)")));
    }
    let mut m = DMatrix::<f64>::identity(ns, ns);
    let mut r = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            r[s] += p * mdp.reward(s, a);
            for (s2, &t) in mdp.next_dist(s, a).iter().enumerate() {
                m[(s, s2)] -= gamma * p * t;
            }
        }
    }
    let v = m
        .lu()
        .solve(&r)
        .ok_or_else(|| TabularError::Numeric("singular policy-evaluation system".into()))?;
    let v = Array1::from_iter(v.iter().copied());
    let q = backup(mdp, &v);
    // V recomputed from Q so that V = Σ π Q holds to rounding
    let v = expected_under(policy, &q);
    Ok(Evaluation { q, v })
}

/// One application of the Bellman expectation operator `T^π` to a Q-table.
pub fn apply_bellman(mdp: &TabularMdp, policy: &TabularPolicy, q: &Array2<f64>) -> Result<Array2<f64>, TabularError> {
    policy.check_shape(mdp)?;
    if q.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(TabularError::Policy(format!("Q-table shape {:?}", q.dim())));
    }
    Ok(backup(mdp, &expected_under(policy, q)))
}

pub fn sup_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Value iteration until the sup-norm change falls below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<OptimalValues, TabularError> {
    let ns = mdp.n_states();
    let mut v = Array1::zeros(ns);
    let mut q = backup(mdp, &v);
    let max_iter = 1_000_000;
    for it in 1..=max_iter {
        let v_new = q.map_axis(ndarray::Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
        let change = v_new.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = v_new;
        q = backup(mdp, &v);
        if change < tol {
            let policy = TabularPolicy::greedy(&q);
            let v = q.map_axis(ndarray::Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
            return Ok(OptimalValues { q, v, policy, iterations: it });
        }
    }
    Err(TabularError::Numeric(format!("value iteration did not reach {tol} in {max_iter} sweeps")))
}

/// Plain policy iteration from `initial`: the sequence `π₀, π₁, …` with
/// `π_{k+1}` greedy in `Q^{π_k}` (ties to the lowest index).
pub fn policy_iteration(
    mdp: &TabularMdp,
    initial: &TabularPolicy,
    iterations: usize,
) -> Result<Vec<TabularPolicy>, TabularError> {
    let mut trace = vec![initial.clone()];
    for _ in 0..iterations {
        let eval = exact_policy_evaluation(mdp, trace.last().unwrap())?;
        trace.push(TabularPolicy::greedy(&eval.q));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from;
    use rand::Rng;

    #[test]
    fn absorbing_state_geometric_series() {
        let mdp = TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], 0.99, vec![1.0]).unwrap();
        let e = exact_policy_evaluation(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((e.v[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn myopic_q_is_reward() {
        let mut rng = rng_from(0, 0);
        let mdp = TabularMdp::random(4, 3, 0.5, &mut rng).unwrap().with_gamma(0.0).unwrap();
        let e = exact_policy_evaluation(&mdp, &TabularPolicy::uniform(4, 3)).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert_eq!(e.q[[s, a]], mdp.reward(s, a));
            }
        }
    }

    #[test]
    fn evaluation_is_a_fixed_point() {
        let mut rng = rng_from(1, 0);
        let mdp = TabularMdp::random(6, 3, 0.95, &mut rng).unwrap();
        let pi = TabularPolicy::uniform(6, 3);
        let e = exact_policy_evaluation(&mdp, &pi).unwrap();
        assert!(sup_distance(&apply_bellman(&mdp, &pi, &e.q).unwrap(), &e.q) < 1e-10);
    }

    #[test]
    fn contraction_ratio() {
        let mut rng = rng_from(2, 0);
        for _ in 0..20 {
            let mdp = TabularMdp::random(5, 2, 0.9, &mut rng).unwrap();
            let pi = TabularPolicy::uniform(5, 2);
            let q1 = Array2::from_shape_fn((5, 2), |_| rng.random_range(-10.0..10.0));
            let q2 = Array2::from_shape_fn((5, 2), |_| rng.random_range(-10.0..10.0));
            let ratio = sup_distance(&apply_bellman(&mdp, &pi, &q1).unwrap(), &apply_bellman(&mdp, &pi, &q2).unwrap())
                / sup_distance(&q1, &q2);
            assert!(ratio <= 0.9 + 1e-12);
        }
    }

    #[test]
    fn value_iteration_matches_policy_iteration() {
        let mut rng = rng_from(3, 0);
        let mdp = TabularMdp::random(7, 4, 0.9, &mut rng).unwrap();
        let vi = value_iteration(&mdp, 1e-12).unwrap();
        let trace = policy_iteration(&mdp, &TabularPolicy::uniform(7, 4), 30).unwrap();
        let last = exact_policy_evaluation(&mdp, trace.last().unwrap()).unwrap();
        assert!(sup_distance(&vi.q, &last.q) < 1e-9);
    }

    #[test]
    fn chain_optimum() {
        // always advancing: V*(last) = 1/(1 − γ), V*(0) = γ^{n−1}/(1 − γ)
        let mdp = TabularMdp::chain(4, 0.9).unwrap();
        let vi = value_iteration(&mdp, 1e-13).unwrap();
        assert!((vi.v[3] - 10.0).abs() < 1e-9);
        assert!((vi.v[0] - 0.9f64.powi(3) * 10.0).abs() < 1e-9);
    }
}
