use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam step. Parameters are untouched if any
    /// gradient is non-finite.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &Gradients,
        cfg: &AdamConfig,
    ) -> Result<(), NnError> {
        if grads.tensors.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::Shape(format!(
                "adam: {} params, {} gradients, {} moments",
                params.len(),
                grads.tensors.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.tensors.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(NnError::Shape(format!(
                    "adam: gradient for `{}` has shape {:?}",
                    params.name(i),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient(params.name(i).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.tensors.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
