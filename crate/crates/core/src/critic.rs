//! Policy evaluation: twin Q-networks for the online policy and for the
//! implicit offline-optimal policy, plus the expectile value head.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as RandRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::SquashedGaussianPolicy;
use crate::numerics::{
    expectile_loss, expectile_loss_grad, polyak_update, Activation, AdamState, ExpectileFactor, Gradients, Mlp,
    NumericsError,
};
use crate::replay::Batch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite {0}; step rejected")]
    NonFinite(String),
    #[error("empty batch")]
    Empty,
}

/// Network sizes shared by the critic constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticShape {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
}

impl CriticShape {
    fn sizes(&self, input: usize) -> Vec<usize> {
        let mut v = vec![input];
        v.extend(&self.hidden);
        v.push(1);
        v
    }
}

/// `state ⊕ action` rows.
pub fn state_action(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("state and action batches have equal row counts")
}

/// Mean of `½(net(x) − y)²` over the batch and its parameter gradient.
pub fn squared_loss_and_grad(
    net: &Mlp,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
) -> Result<(f64, Gradients), NumericsError> {
    let n = inputs.nrows() as f64;
    let (out, mut tape) = net.forward_batch(inputs)?;
    let resid = &out.column(0) - &targets;
    let loss = resid.iter().map(|r| 0.5 * r * r).sum::<f64>() / n;
    let g = (resid / n).insert_axis(Axis(1));
    let (grads, _) = tape.backward_batch(g.view())?;
    Ok((loss, grads))
}

/// Mean of `L₂^τ(q − V(s))` over the batch and its parameter gradient.
pub fn expectile_loss_and_grad(
    v: &Mlp,
    states: ArrayView2<'_, f64>,
    q_values: ArrayView1<'_, f64>,
    tau: ExpectileFactor,
) -> Result<(f64, Gradients), NumericsError> {
    let n = states.nrows() as f64;
    let (out, mut tape) = v.forward_batch(states)?;
    let resid = &q_values - &out.column(0);
    let loss = resid.iter().map(|&r| expectile_loss(r, tau)).sum::<f64>() / n;
    // ∂/∂V = −L′(resid)
    let g = resid.mapv(|r| -expectile_loss_grad(r, tau) / n).insert_axis(Axis(1));
    let (grads, _) = tape.backward_batch(g.view())?;
    Ok((loss, grads))
}

/// Twin Q-networks with target copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    opt1: AdamState,
    opt2: AdamState,
    /// Use the element-wise minimum of both heads; otherwise the first head only.
    pub clipped: bool,
}

impl CriticPair {
    pub fn new<R: RandRng + ?Sized>(shape: &CriticShape, rng: &mut R) -> Result<Self, CriticError> {
        let sizes = shape.sizes(shape.state_dim + shape.action_dim);
        let q1 = Mlp::new(&sizes, shape.activation, rng)?;
        let q2 = Mlp::new(&sizes, shape.activation, rng)?;
        Ok(Self::from_heads(q1, q2, shape.lr))
    }

    /// Targets start as exact copies of the heads.
    pub fn from_heads(q1: Mlp, q2: Mlp, lr: f64) -> Self {
        CriticPair {
            opt1: AdamState::for_mlp(&q1, lr),
            opt2: AdamState::for_mlp(&q2, lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            clipped: true,
        }
    }

    fn heads(&self, use_target: bool) -> (&Mlp, &Mlp) {
        if use_target {
            (&self.q1_target, &self.q2_target)
        } else {
            (&self.q1, &self.q2)
        }
    }

    /// Clipped value `min(Q₁, Q₂)` for each row.
    pub fn q_min(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
        use_target: bool,
    ) -> Result<Array1<f64>, CriticError> {
        let x = state_action(states, actions);
        let (a, b) = self.heads(use_target);
        let qa = a.predict_batch(x.view())?.column(0).to_owned();
        if !self.clipped {
            return Ok(qa);
        }
        let qb = b.predict_batch(x.view())?;
        Ok(ndarray::Zip::from(&qa).and(qb.column(0)).map_collect(|&x, &y| x.min(y)))
    }

    /// Online clipped value and its gradient with respect to the actions.
    /// Ties between heads are attributed to the first head.
    pub fn q_min_action_grad(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), CriticError> {
        let sd = states.ncols();
        let x = state_action(states, actions);
        let n = x.nrows();
        let (o1, mut t1) = self.q1.forward_batch(x.view())?;
        let (o2, mut t2) = self.q2.forward_batch(x.view())?;
        let mut q = Array1::zeros(n);
        let mut g1 = Array2::zeros((n, 1));
        let mut g2 = Array2::zeros((n, 1));
        for i in 0..n {
            if !self.clipped || o1[[i, 0]] <= o2[[i, 0]] {
                q[i] = o1[[i, 0]];
                g1[[i, 0]] = 1.0;
            } else {
                q[i] = o2[[i, 0]];
                g2[[i, 0]] = 1.0;
            }
        }
        let (_, d1) = t1.backward_batch(g1.view())?;
        let mut da = d1.slice(s![.., sd..]).to_owned();
        if self.clipped {
            let (_, d2) = t2.backward_batch(g2.view())?;
            da += &d2.slice(s![.., sd..]);
        }
        Ok((q, da))
    }

    /// One step on both heads toward fixed targets. Both gradients are
    /// computed before either head moves, so a rejected step changes nothing.
    pub fn regress(&mut self, inputs: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<f64, CriticError> {
        if inputs.nrows() == 0 {
            return Err(CriticError::Empty);
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(CriticError::NonFinite("critic target".into()));
        }
        let (l1, g1) = squared_loss_and_grad(&self.q1, inputs, targets)?;
        let (l2, g2) = squared_loss_and_grad(&self.q2, inputs, targets)?;
        if !(l1.is_finite() && l2.is_finite() && g1.is_finite() && g2.is_finite()) {
            return Err(CriticError::NonFinite("critic gradient".into()));
        }
        self.opt1.step(&mut self.q1, &g1)?;
        self.opt2.step(&mut self.q2, &g2)?;
        Ok(0.5 * (l1 + l2))
    }

    /// Soft TD step for the online policy's critic:
    /// `y = r + γ(1 − d)[min Q̄(s′, a′) − α log π(a′|s′)]`, `a′ ~ π(·|s′)`.
    pub fn update_q_pi<R: RandRng + ?Sized>(
        &mut self,
        batch: &Batch,
        policy: &SquashedGaussianPolicy,
        alpha: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<f64, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::Empty);
        }
        let targets = self.soft_targets(batch, policy, alpha, gamma, rng)?;
        let x = state_action(batch.states.view(), batch.actions.view());
        self.regress(x.view(), targets.view())
    }

    /// The regression targets used by [`CriticPair::update_q_pi`].
    pub fn soft_targets<R: RandRng + ?Sized>(
        &self,
        batch: &Batch,
        policy: &SquashedGaussianPolicy,
        alpha: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Array1<f64>, CriticError> {
        let sample = policy
            .sample_batch(batch.next_states.view(), rng)
            .map_err(|e| CriticError::NonFinite(e.to_string()))?;
        let q_next = self.q_min(batch.next_states.view(), sample.actions.view(), true)?;
        let soft = &q_next - &(alpha * &sample.log_probs);
        Ok(bootstrap(batch, gamma, soft.view()))
    }

    /// TD step for the deterministic actor: `y = r + γ(1 − d)·min Q̄(s′, π(s′))`
    /// with `π(s′)` the squashed mean action and no entropy term.
    pub fn update_q_pi_deterministic(
        &mut self,
        batch: &Batch,
        policy: &SquashedGaussianPolicy,
        gamma: f64,
    ) -> Result<f64, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::Empty);
        }
        let next = policy
            .mean_actions(batch.next_states.view())
            .map_err(|e| CriticError::NonFinite(e.to_string()))?;
        let q_next = self.q_min(batch.next_states.view(), next.view(), true)?;
        let targets = bootstrap(batch, gamma, q_next.view());
        let x = state_action(batch.states.view(), batch.actions.view());
        self.regress(x.view(), targets.view())
    }

    /// `y = r + γ(1 − d)·V^μ*(s′)`; only buffer actions are ever evaluated.
    pub fn update_q_mu(&mut self, v_mu: &OfflineValueHead, batch: &Batch, gamma: f64) -> Result<f64, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::Empty);
        }
        let v_next = v_mu.value(batch.next_states.view())?;
        let targets = bootstrap(batch, gamma, v_next.view());
        let x = state_action(batch.states.view(), batch.actions.view());
        self.regress(x.view(), targets.view())
    }

    pub fn polyak(&mut self, rate: f64) -> Result<(), CriticError> {
        polyak_update(&mut self.q1_target, &self.q1, rate)?;
        polyak_update(&mut self.q2_target, &self.q2, rate)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.q1.is_finite() && self.q2.is_finite() && self.q1_target.is_finite() && self.q2_target.is_finite()
    }
}

fn bootstrap(batch: &Batch, gamma: f64, next_value: ArrayView1<'_, f64>) -> Array1<f64> {
    ndarray::Zip::from(&batch.rewards)
        .and(&batch.terminated)
        .and(next_value)
        .map_collect(|&r, &d, &v| if d == 1.0 { r } else { r + gamma * v })
}

/// Monte-Carlo soft value `V^π(s) ≈ (1/n)Σ[min Q(s, aᵢ) − α log π(aᵢ|s)]`
/// using the online heads. No parameters change.
pub fn compute_v_pi<R: RandRng + ?Sized>(
    pair: &CriticPair,
    policy: &SquashedGaussianPolicy,
    states: ArrayView2<'_, f64>,
    alpha: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<Array1<f64>, CriticError> {
    if n_samples == 0 {
        return Err(CriticError::Numerics(NumericsError::Domain("v_pi sample count must be at least 1".into())));
    }
    let mut acc = Array1::zeros(states.nrows());
    for _ in 0..n_samples {
        let sample = policy
            .sample_batch(states, rng)
            .map_err(|e| CriticError::NonFinite(e.to_string()))?;
        let q = pair.q_min(states, sample.actions.view(), false)?;
        acc += &(&q - &(alpha * &sample.log_probs));
    }
    if n_samples > 1 {
        acc /= n_samples as f64;
    }
    Ok(acc)
}

/// `V^π(s) = min Q(s, π(s))` for the deterministic actor, online heads.
pub fn deterministic_v_pi(
    pair: &CriticPair,
    policy: &SquashedGaussianPolicy,
    states: ArrayView2<'_, f64>,
) -> Result<Array1<f64>, CriticError> {
    let a = policy.mean_actions(states).map_err(|e| CriticError::NonFinite(e.to_string()))?;
    pair.q_min(states, a.view(), false)
}

/// Expectile-regressed state value of the offline optimal policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineValueHead {
    pub v: Mlp,
    opt: AdamState,
    pub tau: ExpectileFactor,
}

impl OfflineValueHead {
    pub fn new<R: RandRng + ?Sized>(shape: &CriticShape, tau: ExpectileFactor, rng: &mut R) -> Result<Self, CriticError> {
        let v = Mlp::new(&shape.sizes(shape.state_dim), shape.activation, rng)?;
        Ok(Self::from_net(v, tau, shape.lr))
    }

    pub fn from_net(v: Mlp, tau: ExpectileFactor, lr: f64) -> Self {
        OfflineValueHead { opt: AdamState::for_mlp(&v, lr), v, tau }
    }

    pub fn value(&self, states: ArrayView2<'_, f64>) -> Result<Array1<f64>, CriticError> {
        Ok(self.v.predict_batch(states)?.column(0).to_owned())
    }

    /// One expectile step toward the target-network `min Q^μ*(s, a)` of the
    /// buffer pairs in `batch`.
    pub fn update_v_mu(&mut self, q_mu: &CriticPair, batch: &Batch) -> Result<f64, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::Empty);
        }
        let q = q_mu.q_min(batch.states.view(), batch.actions.view(), true)?;
        self.regress(batch.states.view(), q.view())
    }

    /// One expectile step toward explicit per-row values.
    pub fn regress(&mut self, states: ArrayView2<'_, f64>, q: ArrayView1<'_, f64>) -> Result<f64, CriticError> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(CriticError::NonFinite("expectile target".into()));
        }
        let (loss, grads) = expectile_loss_and_grad(&self.v, states, q, self.tau)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(CriticError::NonFinite("value gradient".into()));
        }
        self.opt.step(&mut self.v, &grads)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from;
    use crate::tabular;
    use crate::envs::TabularMdp;

    fn shape(sd: usize, ad: usize, hidden: &[usize], lr: f64) -> CriticShape {
        CriticShape { state_dim: sd, action_dim: ad, hidden: hidden.to_vec(), activation: Activation::Elu, lr }
    }

    /// A network computing `w·x` with no hidden layer.
    fn linear(weights: &[f64]) -> Mlp {
        let layer = crate::numerics::Dense {
            weight: Array2::from_shape_vec((1, weights.len()), weights.to_vec()).unwrap(),
            bias: Array1::zeros(1),
        };
        Mlp::from_layers(vec![layer], Activation::Identity).unwrap()
    }

    fn constant(value: f64, input: usize) -> Mlp {
        let layer = crate::numerics::Dense { weight: Array2::zeros((1, input)), bias: Array1::from_elem(1, value) };
        Mlp::from_layers(vec![layer], Activation::Identity).unwrap()
    }

    fn one_row(s: &[f64], a: &[f64], r: f64, s2: &[f64], d: bool) -> Batch {
        Batch::from_transitions(&[crate::replay::Transition {
            state: s.to_vec(),
            action: a.to_vec(),
            reward: r,
            next_state: s2.to_vec(),
            terminated: d,
        }])
    }

    #[test]
    fn q_min_takes_smaller_head() {
        let pair = CriticPair::from_heads(constant(3.0, 2), constant(5.0, 2), 1e-3);
        let s = Array2::zeros((2, 1));
        let a = Array2::zeros((2, 1));
        assert_eq!(pair.q_min(s.view(), a.view(), false).unwrap().to_vec(), vec![3.0, 3.0]);
        let same = CriticPair::from_heads(constant(4.0, 2), constant(4.0, 2), 1e-3);
        assert_eq!(same.q_min(s.view(), a.view(), true).unwrap()[0], 4.0);
    }

    #[test]
    fn polyak_rate_one_copies_online() {
        let mut rng = rng_from(0, 0);
        let mut pair = CriticPair::new(&shape(2, 1, &[8], 1e-3), &mut rng).unwrap();
        let b = one_row(&[0.1, 0.2], &[0.3], 1.0, &[0.0, 0.0], false);
        let x = state_action(b.states.view(), b.actions.view());
        pair.regress(x.view(), ndarray::arr1(&[2.0]).view()).unwrap();
        assert_ne!(pair.q1, pair.q1_target);
        pair.polyak(1.0).unwrap();
        let s = b.states.view();
        let a = b.actions.view();
        assert_eq!(pair.q_min(s, a, true).unwrap(), pair.q_min(s, a, false).unwrap());
    }

    #[test]
    fn terminal_and_myopic_targets_are_rewards() {
        let mut rng = rng_from(1, 0);
        let policy = SquashedGaussianPolicy::new(2, 1, &[8], Activation::Elu, vec![-1.0], vec![1.0], 1e-3, &mut rng).unwrap();
        let pair = CriticPair::from_heads(constant(7.0, 3), constant(9.0, 3), 1e-3);
        let term = one_row(&[0.0, 0.0], &[0.5], 0.25, &[1.0, 1.0], true);
        assert_eq!(pair.soft_targets(&term, &policy, 0.3, 0.99, &mut rng).unwrap()[0], 0.25);
        let live = one_row(&[0.0, 0.0], &[0.5], 0.25, &[1.0, 1.0], false);
        assert_eq!(pair.soft_targets(&live, &policy, 0.3, 0.0, &mut rng).unwrap()[0], 0.25);
        // α = 0 and constant heads: r + γ·7
        let y = pair.soft_targets(&live, &policy, 0.0, 0.5, &mut rng).unwrap()[0];
        assert_eq!(y, 0.25 + 0.5 * 7.0);
    }

    #[test]
    fn q_pi_converges_to_geometric_series() {
        // two states, deterministic swap, reward 1: Q = 1/(1 − γ) = 100
        let mut rng = rng_from(2, 0);
        let policy = SquashedGaussianPolicy::new(2, 1, &[4], Activation::Elu, vec![-1.0], vec![1.0], 1e-3, &mut rng).unwrap();
        // tabular features: one-hot state, action input ignored by a zero weight
        let mut pair = CriticPair::from_heads(linear(&[0.0, 0.0, 0.0]), linear(&[0.0, 0.0, 0.0]), 0.05);
        let rows = [
            crate::replay::Transition { state: vec![1.0, 0.0], action: vec![0.0], reward: 1.0, next_state: vec![0.0, 1.0], terminated: false },
            crate::replay::Transition { state: vec![0.0, 1.0], action: vec![0.0], reward: 1.0, next_state: vec![1.0, 0.0], terminated: false },
        ];
        let batch = Batch::from_transitions(&rows);
        for _ in 0..20_000 {
            pair.update_q_pi(&batch, &policy, 0.0, 0.99, &mut rng).unwrap();
            // freeze the action weight so the features stay tabular
            for head in [&mut pair.q1, &mut pair.q2] {
                head.layers_mut()[0].weight[[0, 2]] = 0.0;
            }
            pair.polyak(0.05).unwrap();
        }
        let q = pair.q_min(batch.states.view(), batch.actions.view(), false).unwrap();
        for v in q.iter() {
            assert!((v - 100.0).abs() < 1.0, "{q}");
        }
    }

    #[test]
    fn constant_critic_gives_constant_v_pi() {
        let mut rng = rng_from(3, 0);
        let policy = SquashedGaussianPolicy::new(3, 2, &[8], Activation::Elu, vec![-2.0; 2], vec![2.0; 2], 1e-3, &mut rng).unwrap();
        let pair = CriticPair::from_heads(constant(-1.5, 5), constant(2.0, 5), 1e-3);
        let states = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        for n in [1, 7] {
            let v = compute_v_pi(&pair, &policy, states.view(), 0.0, n, &mut rng).unwrap();
            assert!(v.iter().all(|&x| x == -1.5));
        }
    }

    #[test]
    fn v_pi_single_sample_is_unbiased() {
        let mut rng = rng_from(4, 0);
        let policy = SquashedGaussianPolicy::new(2, 1, &[8], Activation::Elu, vec![-1.0], vec![1.0], 1e-3, &mut rng).unwrap();
        let pair = CriticPair::new(&shape(2, 1, &[16], 1e-3), &mut rng).unwrap();
        let s = ndarray::arr2(&[[0.3, -0.7]]);
        let oracle = compute_v_pi(&pair, &policy, s.view(), 0.2, 200_000, &mut rng).unwrap()[0];
        let draws: Vec<f64> =
            (0..10_000).map(|_| compute_v_pi(&pair, &policy, s.view(), 0.2, 1, &mut rng).unwrap()[0]).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - oracle).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {oracle} (sd {sd})");
    }

    #[test]
    fn symmetric_expectile_is_plain_regression() {
        let mut rng = rng_from(5, 0);
        let v = Mlp::new(&[2, 8, 1], Activation::Elu, &mut rng).unwrap();
        let states = ndarray::arr2(&[[0.1, 0.2], [-0.3, 0.4], [0.9, -0.5]]);
        let q = ndarray::arr1(&[1.0, -2.0, 0.5]);
        let (le, ge) = expectile_loss_and_grad(&v, states.view(), q.view(), ExpectileFactor::new(0.5).unwrap()).unwrap();
        let x = states.clone();
        let (ls, gs) = squared_loss_and_grad(&v, x.view(), q.view()).unwrap();
        // L₂^0.5(x) = ½x², so both losses and gradients coincide
        assert!((le - ls).abs() < 1e-15);
        for (a, b) in ge.tensors().iter().zip(gs.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    fn fit_expectile(values: &[f64], tau: f64, steps: usize) -> f64 {
        let mut rng = rng_from(6, 0);
        let v = Mlp::new(&[1, 16, 1], Activation::Elu, &mut rng).unwrap();
        let mut head = OfflineValueHead::from_net(v, ExpectileFactor::new(tau).unwrap(), 1e-2);
        let states = Array2::from_elem((values.len(), 1), 1.0);
        let q = Array1::from_vec(values.to_vec());
        for _ in 0..steps {
            head.regress(states.view(), q.view()).unwrap();
        }
        head.value(ndarray::arr2(&[[1.0]]).view()).unwrap()[0]
    }

    #[test]
    fn expectile_head_matches_set_expectiles() {
        let v = fit_expectile(&[0.0, 1.0], 0.9, 3000);
        assert!((v - 0.9).abs() < 0.02, "{v}");
        let v = fit_expectile(&[0.0, 1.0, 5.0], 0.99, 5000);
        let oracle = tabular::expectile_of_set(&[0.0, 1.0, 5.0], 0.99).unwrap();
        assert!((4.5..=5.0).contains(&v) && (v - oracle).abs() < 0.05, "{v} vs {oracle}");
    }

    #[test]
    fn expectile_is_monotone_in_tau() {
        let values = [0.2, -1.0, 3.0, 0.7];
        assert!(fit_expectile(&values, 0.9, 4000) >= fit_expectile(&values, 0.5, 4000) - 1e-2);
    }

    #[test]
    fn zero_offline_value_regresses_onto_rewards() {
        let mut pair = CriticPair::from_heads(linear(&[0.0, 0.0]), linear(&[0.0, 0.0]), 0.05);
        let v = OfflineValueHead::from_net(constant(0.0, 1), ExpectileFactor::default(), 1e-3);
        let batch = one_row(&[1.0], &[1.0], 0.6, &[1.0], false);
        for _ in 0..3000 {
            pair.update_q_mu(&v, &batch, 0.99).unwrap();
        }
        let q = pair.q_min(batch.states.view(), batch.actions.view(), false).unwrap()[0];
        assert!((q - 0.6).abs() < 1e-3, "{q}");
    }

    #[test]
    fn offline_pair_recovers_optimal_values_on_the_chain() {
        // every (s, a) of a 3-state chain in the buffer; one-hot (s, a) features
        let mdp = TabularMdp::chain(3, 0.9).unwrap();
        let q_star = tabular::value_iteration(&mdp, 1e-12).unwrap().q;
        let mut rows = Vec::new();
        for st in 0..3 {
            for a in 0..2 {
                let next = mdp.next_dist(st, a).iter().position(|&p| p == 1.0).unwrap();
                let mut s = vec![0.0; 3];
                s[st] = 1.0;
                let mut s2 = vec![0.0; 3];
                s2[next] = 1.0;
                // action as a ±1 indicator and its product features live in the state part
                let mut feat = vec![0.0; 6];
                feat[st * 2 + a] = 1.0;
                rows.push(crate::replay::Transition {
                    state: s.clone(),
                    action: feat,
                    reward: mdp.reward(st, a),
                    next_state: s2,
                    terminated: false,
                });
            }
        }
        let batch = Batch::from_transitions(&rows);
        let zero = |n| linear(&vec![0.0; n]);
        let mut pair = CriticPair::from_heads(zero(9), zero(9), 0.02);
        let mut head = OfflineValueHead::from_net(zero(3), ExpectileFactor::new(0.99).unwrap(), 0.02);
        for _ in 0..30_000 {
            pair.update_q_mu(&head, &batch, 0.9).unwrap();
            head.update_v_mu(&pair, &batch).unwrap();
            pair.polyak(0.05).unwrap();
        }
        let q = pair.q_min(batch.states.view(), batch.actions.view(), false).unwrap();
        for (k, v) in q.iter().enumerate() {
            let exact = q_star[[k / 2, k % 2]];
            assert!((v - exact).abs() <= 0.05 * exact.abs(), "pair {k}: {v} vs {exact}");
        }
    }
}
