use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng;

use super::dp::{exact_policy_evaluation, Evaluation};
use super::{argmax, TabularDataset, TabularError, TabularPolicy};
use crate::actor::GateMode;
use crate::envs::TabularMdp;
use crate::numerics::rng_from;

/// The best deterministic policy restricted to dataset actions, with its values.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineOptimal {
    pub policy: TabularPolicy,
    pub q: Array2<f64>,
    pub v: Array1<f64>,
    pub covered: Vec<bool>,
}

/// States reachable from the start distribution or any covered state by
/// following dataset actions must themselves be covered.
fn check_coverage(mdp: &TabularMdp, dataset: &TabularDataset) -> Result<Vec<bool>, TabularError> {
    let ns = mdp.n_states();
    if dataset.n_states() != ns || dataset.n_actions() != mdp.n_actions() {
        return Err(TabularError::Dataset(format!(
            "dataset is {}×{}, MDP is {}×{}",
            dataset.n_states(),
            dataset.n_actions(),
            ns,
            mdp.n_actions()
        )));
    }
    let covered: Vec<bool> = (0..ns).map(|s| dataset.is_covered(s)).collect();
    let mut seen = vec![false; ns];
    let mut queue: VecDeque<usize> = (0..ns).filter(|&s| mdp.initial()[s] > 0.0 || covered[s]).collect();
    for &s in &queue {
        seen[s] = true;
    }
    while let Some(s) = queue.pop_front() {
        for a in dataset.support(s) {
            for (s2, &p) in mdp.next_dist(s, a).iter().enumerate() {
                if p > 0.0 && !seen[s2] {
                    seen[s2] = true;
                    queue.push_back(s2);
                }
            }
        }
    }
    if let Some(state) = (0..ns).find(|&s| seen[s] && !covered[s]) {
        return Err(TabularError::Coverage { state });
    }
    Ok(covered)
}

/// Policy iteration over dataset-supported actions. Uncovered (and hence
/// unreachable) states play action 0.
pub fn offline_optimal(mdp: &TabularMdp, dataset: &TabularDataset) -> Result<OfflineOptimal, TabularError> {
    let covered = check_coverage(mdp, dataset)?;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let supports: Vec<Vec<usize>> = (0..ns).map(|s| dataset.support(s)).collect();
    let mut actions: Vec<usize> = supports.iter().map(|sup| sup.first().copied().unwrap_or(0)).collect();
    // a deterministic policy changes only on strict improvement, so this terminates
    for _ in 0..10_000 {
        let policy = TabularPolicy::deterministic(&actions, na);
        let eval = exact_policy_evaluation(mdp, &policy)?;
        let mut changed = false;
        for s in 0..ns {
            if supports[s].is_empty() {
                continue;
            }
            let best = supports[s][argmax(supports[s].iter().map(|&a| eval.q[[s, a]]))];
            if eval.q[[s, best]] > eval.q[[s, actions[s]]] + 1e-12 {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok(OfflineOptimal { policy, q: eval.q, v: eval.v, covered });
        }
    }
    Err(TabularError::Numeric("restricted policy iteration did not stabilise".into()))
}

pub fn offline_optimal_policy(mdp: &TabularMdp, dataset: &TabularDataset) -> Result<TabularPolicy, TabularError> {
    Ok(offline_optimal(mdp, dataset)?.policy)
}

/// Policy used at states outside the constraint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GreedyBranch {
    /// Deterministic argmax of Q, ties to the lowest index.
    #[default]
    Argmax,
    /// `softmax(β·Q)`.
    Softmax(f64),
}

/// Constrained improvement step: at gated states `π'(a|s) ∝ μ*(a|s)·exp(β·Q(s,a))`
/// over the support of `μ*`; elsewhere the greedy branch.
pub fn closed_form_improvement(
    mu: &TabularPolicy,
    q: &Array2<f64>,
    beta: f64,
    gate: &[bool],
    greedy: GreedyBranch,
) -> Result<TabularPolicy, TabularError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(TabularError::Numeric(format!("inverse temperature {beta} must be positive")));
    }
    let (ns, na) = q.dim();
    if mu.probs().dim() != (ns, na) || gate.len() != ns {
        return Err(TabularError::Policy("μ*, Q-table and gate disagree in shape".into()));
    }
    let mut out = Array2::zeros((ns, na));
    for s in 0..ns {
        let row = q.row(s);
        if gate[s] {
            let support: Vec<usize> = (0..na).filter(|&a| mu.prob(s, a) > 0.0).collect();
            let top = support.iter().map(|&a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = support.iter().map(|&a| mu.prob(s, a) * (beta * (row[a] - top)).exp()).collect();
            let z: f64 = weights.iter().sum();
            if !(z > 0.0) || !z.is_finite() {
                return Err(TabularError::Numeric(format!("state {s}: normaliser {z}")));
            }
            for (&a, w) in support.iter().zip(weights) {
                out[[s, a]] = w / z;
            }
        } else {
            match greedy {
                GreedyBranch::Argmax => out[[s, argmax(row.iter().copied())]] = 1.0,
                GreedyBranch::Softmax(b) => {
                    let top = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let w: Vec<f64> = row.iter().map(|&x| (b * (x - top)).exp()).collect();
                    let z: f64 = w.iter().sum();
                    for a in 0..na {
                        out[[s, a]] = w[a] / z;
                    }
                }
            }
        }
    }
    TabularPolicy::new(out)
}

/// How the dataset evolves across offline-boosted policy iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetGrowth {
    Static,
    /// Before each improvement, roll out the current policy from the start
    /// distribution and add every visited pair.
    Rollouts { episodes: usize, horizon: usize, seed: u64 },
}

/// One iteration of offline-boosted policy iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub policy: TabularPolicy,
    pub eval: Evaluation,
    pub dataset: TabularDataset,
    pub offline: OfflineOptimal,
    /// States where the constraint was active when producing the next policy.
    pub gate: Vec<bool>,
}

fn grow(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    dataset: &mut TabularDataset,
    growth: DatasetGrowth,
    iteration: usize,
) -> Result<(), TabularError> {
    let DatasetGrowth::Rollouts { episodes, horizon, seed } = growth else {
        return Ok(());
    };
    let mut rng = rng_from(seed, iteration as u64);
    for _ in 0..episodes {
        let mut s = crate::envs::sample_index(mdp.initial(), rng.random::<f64>());
        for _ in 0..horizon {
            let a = crate::envs::sample_index(policy.probs().row(s).as_slice().unwrap(), rng.random::<f64>());
            dataset.add(s, a)?;
            s = mdp.sample_next(s, a, rng.random::<f64>());
        }
    }
    Ok(())
}

/// Alternates exact evaluation, the offline optimum on the (growing) dataset,
/// value-based gating and the closed-form improvement. Returns
/// `iterations + 1` steps; the last one's gate is computed but unused.
pub fn offline_boosted_policy_iteration(
    mdp: &TabularMdp,
    initial_policy: &TabularPolicy,
    initial_dataset: &TabularDataset,
    growth: DatasetGrowth,
    beta: f64,
    mode: GateMode,
    iterations: usize,
) -> Result<Vec<TraceStep>, TabularError> {
    if iterations == 0 {
        return Err(TabularError::Numeric("at least one iteration is required".into()));
    }
    let mut policy = initial_policy.clone();
    let mut dataset = initial_dataset.clone();
    let mut trace = Vec::with_capacity(iterations + 1);
    for k in 0..=iterations {
        let eval = exact_policy_evaluation(mdp, &policy)?;
        grow(mdp, &policy, &mut dataset, growth, k)?;
        let offline = offline_optimal(mdp, &dataset)?;
        let gate: Vec<bool> = (0..mdp.n_states())
            .map(|s| {
                offline.covered[s]
                    && match mode {
                        GateMode::Adaptive => offline.v[s] - eval.v[s] >= 0.0,
                        GateMode::FixedOn => true,
                        GateMode::Off => false,
                    }
            })
            .collect();
        let next = closed_form_improvement(&offline.policy, &eval.q, beta, &gate, GreedyBranch::Argmax)?;
        trace.push(TraceStep { policy, eval, dataset: dataset.clone(), offline, gate });
        policy = next;
    }
    Ok(trace)
}

/// Weighted expectile: the `m` solving `τ Σ w(x − m)₊ = (1 − τ) Σ w(m − x)₊`.
pub fn expectile_of_weighted_set(values: &[f64], weights: &[f64], tau: f64) -> Result<f64, TabularError> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(TabularError::Numeric("expectile needs a non-empty set with one weight per value".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TabularError::Numeric(format!("expectile factor {tau} outside (0, 1)")));
    }
    if weights.iter().any(|&w| !(w > 0.0)) || values.iter().any(|v| !v.is_finite()) {
        return Err(TabularError::Numeric("weights must be positive and values finite".into()));
    }
    let balance = |m: f64| -> f64 {
        values
            .iter()
            .zip(weights)
            .map(|(&x, &w)| if x > m { tau * w * (x - m) } else { -(1.0 - tau) * w * (m - x) })
            .sum()
    };
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // balance is decreasing: positive at the minimum, negative at the maximum
    while hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if balance(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn expectile_of_set(values: &[f64], tau: f64) -> Result<f64, TabularError> {
    expectile_of_weighted_set(values, &vec![1.0; values.len()], tau)
}

/// Tabular fixed point of the offline learner: `V(s)` is the count-weighted
/// τ-expectile of `Q(s, a)` over dataset actions and `Q = R + γPV`.
pub fn fitted_offline_values(
    mdp: &TabularMdp,
    dataset: &TabularDataset,
    tau: f64,
    tol: f64,
) -> Result<(Array2<f64>, Array1<f64>), TabularError> {
    let covered = check_coverage(mdp, dataset)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = Array1::<f64>::zeros(ns);
    for _ in 0..1_000_000 {
        let q = Array2::from_shape_fn((ns, na), |(s, a)| {
            mdp.reward(s, a) + mdp.gamma() * mdp.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
        });
        let mut v_new = Array1::zeros(ns);
        for s in 0..ns {
            if !covered[s] {
                continue;
            }
            let sup = dataset.support(s);
            let vals: Vec<f64> = sup.iter().map(|&a| q[[s, a]]).collect();
            let w: Vec<f64> = sup.iter().map(|&a| dataset.count(s, a) as f64).collect();
            v_new[s] = expectile_of_weighted_set(&vals, &w, tau)?;
        }
        let change = v_new.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = v_new;
        if change < tol {
            return Ok((q, v));
        }
    }
    Err(TabularError::Numeric("offline value iteration did not converge".into()))
}

/// `KL(p ‖ q)` over the support of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Numerically solves `max_π Σ π Q  s.t.  KL(π ‖ μ) ≤ ε, Σ π = 1` for a single
/// state with full-support `μ` and `ε > 0`, by damped Newton on the KKT
/// system in `(log π, η, ν)` with the KL constraint active.
pub fn solve_constrained_program(mu: &[f64], q: &[f64], epsilon: f64) -> Result<Vec<f64>, TabularError> {
    let n = mu.len();
    if n == 0 || q.len() != n || mu.iter().any(|&m| !(m > 0.0)) || !(epsilon > 0.0) {
        return Err(TabularError::Numeric("needs full-support μ, matching Q and ε > 0".into()));
    }
    let log_mu: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let residual = |x: &DVector<f64>| -> DVector<f64> {
        let (eta, nu) = (x[n], x[n + 1]);
        let mut r = DVector::zeros(n + 2);
        for a in 0..n {
            r[a] = q[a] - eta * (x[a] - log_mu[a] + 1.0) - nu;
            let p = x[a].exp();
            r[n] += p;
            r[n + 1] += p * (x[a] - log_mu[a]);
        }
        r[n] -= 1.0;
        r[n + 1] -= epsilon;
        r
    };
    // start: a mild tilt of μ toward high Q, unit multiplier
    let spread = q.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) - q.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    let mut x = DVector::zeros(n + 2);
    let tilt = if spread > 0.0 { 0.5 / spread } else { 0.0 };
    let logits: Vec<f64> = (0..n).map(|a| log_mu[a] + tilt * q[a]).collect();
    let lse = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = lse + logits.iter().map(|v| (v - lse).exp()).sum::<f64>().ln();
    for a in 0..n {
        x[a] = logits[a] - lse;
    }
    x[n] = 1.0;
    x[n + 1] = (0..n).map(|a| q[a] - (x[a] - log_mu[a] + 1.0)).sum::<f64>() / n as f64;

    let mut r = residual(&x);
    for _ in 0..500 {
        let norm = r.norm();
        if norm < 1e-14 {
            break;
        }
        let eta = x[n];
        let mut j = DMatrix::zeros(n + 2, n + 2);
        for a in 0..n {
            let p = x[a].exp();
            j[(a, a)] = -eta;
            j[(a, n)] = -(x[a] - log_mu[a] + 1.0);
            j[(a, n + 1)] = -1.0;
            j[(n, a)] = p;
            j[(n + 1, a)] = p * (x[a] - log_mu[a] + 1.0);
        }
        let step = j
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| TabularError::Numeric("singular KKT Jacobian".into()))?;
        let mut t = 1.0;
        loop {
            let cand = &x + t * &step;
            if cand[n] > 0.0 {
                let rc = residual(&cand);
                if rc.norm() < (1.0 - 1e-4 * t) * norm || t < 1e-12 {
                    x = cand;
                    r = rc;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(TabularError::Numeric("KKT line search stalled".into()));
            }
        }
    }
    if r.norm() > 1e-10 {
        return Err(TabularError::Numeric(format!("KKT residual {} after Newton", r.norm())));
    }
    Ok((0..n).map(|a| x[a].exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{policy_iteration, sup_distance, value_iteration};

    #[test]
    fn closed_form_examples() {
        let mu = TabularPolicy::uniform(1, 2);
        let eq = closed_form_improvement(&mu, &ndarray::arr2(&[[0.3, 0.3]]), 1.0, &[true], GreedyBranch::Argmax).unwrap();
        assert_eq!(eq.probs(), &ndarray::arr2(&[[0.5, 0.5]]));
        let p = closed_form_improvement(&mu, &ndarray::arr2(&[[0.0, 1.0]]), 1.0, &[true], GreedyBranch::Argmax).unwrap();
        let e = std::f64::consts::E;
        assert!((p.prob(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.prob(0, 1) - 0.7310585786300049).abs() < 1e-12);
        let sharp = closed_form_improvement(&mu, &ndarray::arr2(&[[0.0, 1.0]]), 200.0, &[true], GreedyBranch::Argmax).unwrap();
        assert!(sharp.prob(0, 1) > 1.0 - 1e-12);
        // ungated states ignore μ*
        let mu = TabularPolicy::deterministic(&[0], 2);
        let free = closed_form_improvement(&mu, &ndarray::arr2(&[[0.0, 1.0]]), 1.0, &[false], GreedyBranch::Argmax).unwrap();
        assert_eq!(free.prob(0, 1), 1.0);
        // gated states outside μ*'s support get nothing
        let held = closed_form_improvement(&mu, &ndarray::arr2(&[[0.0, 1.0]]), 1.0, &[true], GreedyBranch::Argmax).unwrap();
        assert_eq!(held.prob(0, 0), 1.0);
    }

    #[test]
    fn kkt_solve_matches_closed_form() {
        let mu = [0.5, 0.5];
        let q = [0.0, 1.0];
        let closed = [1.0 / (1.0 + std::f64::consts::E), std::f64::consts::E / (1.0 + std::f64::consts::E)];
        let eps = kl_divergence(&closed, &mu);
        let solved = solve_constrained_program(&mu, &q, eps).unwrap();
        assert!(total_variation(&solved, &closed) < 1e-9, "{solved:?}");
    }

    #[test]
    fn expectile_examples() {
        assert!((expectile_of_set(&[1.0, 2.0, 6.0], 0.5).unwrap() - 3.0).abs() < 1e-10);
        assert!((expectile_of_set(&[0.0, 1.0], 0.9).unwrap() - 0.9).abs() < 1e-10);
        assert!((expectile_of_set(&[0.0, 1.0, 5.0], 0.999).unwrap() - 5.0).abs() < 1e-2);
    }

    #[test]
    fn full_dataset_offline_optimum_is_the_optimum() {
        let mut rng = rng_from(10, 0);
        let mdp = TabularMdp::random(6, 3, 0.9, &mut rng).unwrap();
        let off = offline_optimal(&mdp, &TabularDataset::full(6, 3)).unwrap();
        let vi = value_iteration(&mdp, 1e-13).unwrap();
        assert!(sup_distance(&off.q, &vi.q) < 1e-9);
    }

    #[test]
    fn single_action_dataset_forces_the_policy() {
        let mut rng = rng_from(11, 0);
        let mdp = TabularMdp::random(5, 4, 0.9, &mut rng).unwrap();
        let chosen = [3, 0, 2, 2, 1];
        let pairs: Vec<(usize, usize)> = chosen.iter().copied().enumerate().collect();
        let d = TabularDataset::from_pairs(5, 4, &pairs).unwrap();
        assert_eq!(offline_optimal_policy(&mdp, &d).unwrap(), TabularPolicy::deterministic(&chosen, 4));
    }

    #[test]
    fn restricted_chain_enumeration() {
        // the dataset lacks "advance" at state 0, the only globally optimal first move
        let mdp = TabularMdp::chain(3, 0.9).unwrap();
        let d = TabularDataset::from_pairs(3, 2, &[(0, 0), (1, 0), (1, 1), (2, 0), (2, 1)]).unwrap();
        let off = offline_optimal(&mdp, &d).unwrap();
        // brute force over the 1·2·2 restricted deterministic policies
        let mut best = f64::NEG_INFINITY;
        for a1 in 0..2 {
            for a2 in 0..2 {
                let pi = TabularPolicy::deterministic(&[0, a1, a2], 2);
                best = best.max(exact_policy_evaluation(&mdp, &pi).unwrap().v[0]);
            }
        }
        assert!((off.v[0] - best).abs() < 1e-12);
        assert!(off.v[0] < value_iteration(&mdp, 1e-13).unwrap().v[0]);
        assert_eq!(off.policy.prob(0, 0), 1.0);
    }

    #[test]
    fn reachable_uncovered_state_is_an_error() {
        let mdp = TabularMdp::chain(3, 0.9).unwrap();
        let d = TabularDataset::from_pairs(3, 2, &[(0, 1)]).unwrap();
        assert!(matches!(offline_optimal(&mdp, &d), Err(TabularError::Coverage { state: 1 })));
    }

    #[test]
    fn forced_off_gate_is_policy_iteration() {
        let mut rng = rng_from(12, 0);
        let mdp = TabularMdp::random(6, 3, 0.9, &mut rng).unwrap();
        let init = TabularPolicy::uniform(6, 3);
        let trace = offline_boosted_policy_iteration(
            &mdp,
            &init,
            &TabularDataset::full(6, 3),
            DatasetGrowth::Static,
            1.0,
            GateMode::Off,
            8,
        )
        .unwrap();
        let plain = policy_iteration(&mdp, &init, 8).unwrap();
        let ours: Vec<TabularPolicy> = trace.into_iter().map(|t| t.policy).collect();
        assert_eq!(ours, plain);
    }

    #[test]
    fn fitted_offline_values_approach_the_offline_optimum() {
        let mdp = TabularMdp::chain(4, 0.9).unwrap();
        let d = TabularDataset::full(4, 2);
        let exact = offline_optimal(&mdp, &d).unwrap();
        let (_, v) = fitted_offline_values(&mdp, &d, 0.999, 1e-12).unwrap();
        for s in 0..4 {
            assert!(v[s] <= exact.v[s] + 1e-9 && exact.v[s] - v[s] < 0.05, "{} vs {}", v[s], exact.v[s]);
        }
    }
}
