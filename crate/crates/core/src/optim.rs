//! Adam over lists of tensors.

use serde::{Deserialize, Serialize};
use wali_autograd::{Float, Tensor};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    /// Network training defaults.
    pub fn training() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }

    /// Latent optimization defaults.
    pub fn latent() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{prefix}.lr"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{prefix}.{name}"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{prefix}.eps"), "must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::training()
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Returns updated copies of `params` after one step along `grads`.
    pub fn step(&mut self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Vec<Tensor<T>> {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        params
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(k, (p, g))| {
                assert_eq!(p.shape(), g.shape());
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(i, (&w, &gi))| {
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w - lr * mh / (vh.sqrt() + eps)
                    })
                    .collect();
                Tensor::new(p.shape(), data)
            })
            .collect()
    }
}
