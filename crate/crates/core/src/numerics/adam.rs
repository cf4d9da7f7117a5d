use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use super::NumericsError;

pub const DEFAULT_LR: f64 = 3e-4;

/// Adam with bias correction. Moment buffers are laid out like the
/// parameter tensors they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn with_shapes(lens: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(net: &Mlp, lr: f64) -> Self {
        let lens: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
        Self::with_shapes(&lens, lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One Adam step on a network.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<(), NumericsError> {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        self.step_slices(&mut p, &g)
    }

    /// One Adam step on an arbitrary list of parameter tensors. Non-finite
    /// gradients reject the step and leave parameters and moments untouched.
    pub fn step_slices(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::Dimension(format!(
                "adam state tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(NumericsError::Dimension(format!(
                    "tensor {i}: moment length {}, parameter length {}, gradient length {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(NumericsError::NonFinite("adam gradient".into()));
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(self.t as f64);
        let bc2 = 1.0 - b2.powf(self.t as f64);
        let step = self.lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= step * m[j] / (v[j].sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }

    /// Scalar parameter convenience used by the entropy temperature.
    pub fn step_scalar(&mut self, param: &mut f64, grad: f64) -> Result<(), NumericsError> {
        let mut p = [std::slice::from_mut(param)];
        self.step_slices(&mut p, &[&[grad]])
    }
}
