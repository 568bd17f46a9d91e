use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: step counter plus first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) first: Vec<Tensor2>,
    pub(crate) second: Vec<Tensor2>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Input(format!(
                "betas must lie in [0, 1): {} {}",
                config.beta1, config.beta2
            )));
        }
        let zeros = |s: &ParamStore| {
            s.iter()
                .map(|(_, p)| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            first: zeros(store),
            second: zeros(store),
            config,
            step: 0,
        })
    }

    pub fn first_moment(&self, i: usize) -> &Tensor2 {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor2 {
        &self.second[i]
    }

    /// Restores moments, e.g. from a checkpoint. Shapes must match the store.
    pub fn set_moments(&mut self, i: usize, first: Tensor2, second: Tensor2) -> Result<()> {
        let want = self.first[i].shape();
        for t in [&first, &second] {
            if t.shape() != want {
                return Err(Error::ShapeMismatch {
                    name: format!("optimizer moment {i}"),
                    expected: want,
                    found: t.shape(),
                });
            }
        }
        self.first[i] = first;
        self.second[i] = second;
        Ok(())
    }

    /// Applies one decoupled-weight-decay Adam update using the grads held
    /// in `store`, then zeroes them. A non-finite gradient aborts before
    /// any parameter is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::Training { param: p.name.clone() });
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[j]);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
