use crate::error::{AdError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// ADAM with bias correction over a fixed subset of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, ids: Vec<ParamId>, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = ids
            .iter()
            .map(|&id| Tensor::zeros(params.value(id).shape()))
            .collect();
        Adam {
            config,
            v: m.clone(),
            m,
            ids,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn first_moment(&self, k: usize) -> &Tensor {
        &self.m[k]
    }

    pub fn second_moment(&self, k: usize) -> &Tensor {
        &self.v[k]
    }

    /// One update of every tracked parameter; gradients are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for &id in &self.ids {
            if params.is_frozen(id) {
                return Err(AdError::Frozen(params.name(id).to_string()));
            }
            if params.grad(id).is_none() {
                return Err(AdError::MissingGrad(params.name(id).to_string()));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = params.grad(id).expect("checked above").clone();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        params.zero_grads_of(&self.ids);
        Ok(())
    }
}
