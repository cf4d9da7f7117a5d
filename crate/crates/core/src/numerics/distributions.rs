//! Tanh-squashed diagonal Gaussian and the expectile loss.

use serde::{Deserialize, Serialize};

use super::NumericsError;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Squashed actions are clamped to `|a| ≤ 1 − ACTION_EPS` before `atanh`.
pub const ACTION_EPS: f64 = 1e-6;
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn clamp_log_std(x: f64) -> f64 {
    x.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

#[inline]
pub fn clamp_unit_action(a: f64) -> f64 {
    a.clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 − tanh²(u))` without cancellation for large `|u|`.
#[inline]
pub fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of a tanh-squashed diagonal Gaussian at `action ∈ (−1, 1)^m`.
///
/// `log_std` is clamped to `[−20, 2]` and actions to `1 − 1e-6` in magnitude;
/// the result is the Gaussian log-density of `atanh(action)` minus the
/// log-Jacobian `Σ log(1 − aᵢ²)`.
pub fn squashed_gaussian_logprob(
    mean: &[f64],
    log_std: &[f64],
    action: &[f64],
) -> Result<f64, NumericsError> {
    if mean.len() != log_std.len() || mean.len() != action.len() {
        return Err(NumericsError::Dimension(format!(
            "mean {}, log_std {}, action {}",
            mean.len(),
            log_std.len(),
            action.len()
        )));
    }
    if mean.iter().chain(log_std).chain(action).any(|x| x.is_nan()) {
        return Err(NumericsError::NonFinite("squashed gaussian input".into()));
    }
    let mut total = 0.0;
    for ((&mu, &ls), &a) in mean.iter().zip(log_std).zip(action) {
        let ls = clamp_log_std(ls);
        let a = clamp_unit_action(a);
        let u = a.atanh();
        let z = (u - mu) * (-ls).exp();
        total += -0.5 * z * z - ls - HALF_LOG_2PI - ((1.0 - a) * (1.0 + a)).ln();
    }
    Ok(total)
}

/// Expectile factor `τ ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ExpectileFactor(f64);

impl ExpectileFactor {
    pub fn new(tau: f64) -> Result<Self, NumericsError> {
        if tau > 0.0 && tau < 1.0 {
            Ok(ExpectileFactor(tau))
        } else {
            Err(NumericsError::Domain(format!("expectile factor {tau} outside (0, 1)")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Weight `|τ − 𝟙(x < 0)|` applied to a residual `x`.
    #[inline]
    pub fn weight(self, residual: f64) -> f64 {
        if residual < 0.0 {
            1.0 - self.0
        } else {
            self.0
        }
    }
}

impl Default for ExpectileFactor {
    fn default() -> Self {
        ExpectileFactor(0.9)
    }
}

impl TryFrom<f64> for ExpectileFactor {
    type Error = NumericsError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        ExpectileFactor::new(value)
    }
}

impl From<ExpectileFactor> for f64 {
    fn from(t: ExpectileFactor) -> f64 {
        t.0
    }
}

/// `L₂^τ(x) = |τ − 𝟙(x < 0)|·x²`.
#[inline]
pub fn expectile_loss(residual: f64, tau: ExpectileFactor) -> f64 {
    tau.weight(residual) * residual * residual
}

/// Derivative of [`expectile_loss`] with respect to the residual.
#[inline]
pub fn expectile_loss_grad(residual: f64, tau: ExpectileFactor) -> f64 {
    2.0 * tau.weight(residual) * residual
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_normal_pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn standard_normal_at_mode() {
        let lp = squashed_gaussian_logprob(&[0.0], &[0.0], &[0.0]).unwrap();
        assert!((lp + 0.918_938_533_204_672_8).abs() < 1e-12);
    }

    #[test]
    fn diagonal_case_sums_dimensions() {
        let mean = [0.3, -0.7, 1.2];
        let ls = [-0.5, 0.1, 0.4];
        let a = [0.2, -0.9, 0.6];
        let joint = squashed_gaussian_logprob(&mean, &ls, &a).unwrap();
        let sum: f64 = (0..3)
            .map(|i| squashed_gaussian_logprob(&[mean[i]], &[ls[i]], &[a[i]]).unwrap())
            .sum();
        assert!((joint - sum).abs() < 1e-12);
    }

    #[test]
    fn pushforward_density_matches_and_normalizes() {
        // density of a = tanh(u), u ~ N(0, 1): p(a) = φ(atanh a) / (1 − a²)
        let a = 1.0f64.tanh();
        let expected = standard_normal_pdf(1.0) / (1.0 - a * a);
        let got = squashed_gaussian_logprob(&[0.0], &[0.0], &[a]).unwrap().exp();
        assert!((got - expected).abs() < 1e-6);

        // composite Simpson in u-space over [-12, 12] covers (−1, 1) in a-space
        // without the endpoint singularity: ∫ p(a) da = ∫ p(tanh u)(1 − tanh²u) du.
        // Parameters keep the pre-squash mass inside |u| < atanh(1 − ACTION_EPS) ≈ 7.25,
        // where actions are not clamped.
        for (mu, ls) in [(0.0, 0.0), (0.7, -0.4), (-1.5, -0.3), (1.2, 0.2)] {
            let n = 20_000;
            let (lo, hi) = (-12.0, 12.0);
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let u: f64 = lo + k as f64 * h;
                let a = u.tanh();
                if a.abs() >= 1.0 - ACTION_EPS {
                    continue;
                }
                let p = squashed_gaussian_logprob(&[mu], &[ls], &[a]).unwrap().exp();
                let w = if k == 0 || k == n {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * p * (1.0 - a * a);
            }
            let integral = acc * h / 3.0;
            assert!((integral - 1.0).abs() < 1e-4, "mu {mu} ls {ls}: {integral}");
        }
    }

    #[test]
    fn boundary_actions_are_clamped_not_errors() {
        let lp = squashed_gaussian_logprob(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!(lp.is_finite());
        let lp = squashed_gaussian_logprob(&[0.0], &[50.0], &[-3.0]).unwrap();
        assert!(lp.is_finite());
        assert!(squashed_gaussian_logprob(&[f64::NAN], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn stable_log_jacobian() {
        for u in [-30.0f64, -3.0, -0.1, 0.0, 0.5, 4.0, 25.0] {
            let naive = (1.0 - u.tanh().powi(2)).ln();
            let stable = log1m_tanh_sq(u);
            if naive.is_finite() && u.abs() < 5.0 {
                assert!((naive - stable).abs() < 1e-10);
            }
            assert!(stable.is_finite());
        }
    }

    #[test]
    fn expectile_loss_values() {
        let half = ExpectileFactor::new(0.5).unwrap();
        assert_eq!(expectile_loss(3.0, half), 4.5);
        assert_eq!(expectile_loss(-3.0, half), 4.5);
        let tau = ExpectileFactor::default();
        assert!((expectile_loss(1.0, tau) - 0.9).abs() < 1e-15);
        assert!((expectile_loss(-1.0, tau) - 0.1).abs() < 1e-15);
        assert!(ExpectileFactor::new(1.2).is_err());
        assert!(ExpectileFactor::new(0.0).is_err());
    }

    #[test]
    fn two_point_expectile_is_tau() {
        // τ(1 − m) = (1 − τ)m  ⇒  m = τ; cross-check with a grid search
        let tau = ExpectileFactor::default();
        let objective = |m: f64| expectile_loss(0.0 - m, tau) + expectile_loss(1.0 - m, tau);
        let best = (0..=10_000)
            .map(|k| k as f64 / 10_000.0)
            .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        assert!((best - 0.9).abs() < 1e-4);
    }
}
