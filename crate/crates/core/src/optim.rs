//! Adaptive-moment (Adam) optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

/// Moment buffers per parameter. Each parameter keeps its own step count so
/// that parameters joining training late (after a warm-up stage) still get
/// bias-corrected first updates.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `params` from their stored gradients at learning rate `lr`.
    /// Every listed parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, params: &[ParamId], lr: f64) -> Result<()> {
        if let Some(&missing) = params.iter().find(|&&p| store.grad(p).is_none()) {
            return Err(Error::IncompleteGradient(store.name(missing).to_string()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2, eps) = (F::of(c.beta1), F::of(c.beta2), F::of(c.eps));
        for &p in params {
            let n = store.get(p).len();
            let mo = self.moments.entry(p).or_insert_with(|| Moments {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
                t: 0,
            });
            mo.t += 1;
            let bc1 = F::of(1.0 - c.beta1.powi(mo.t as i32));
            let bc2 = F::of(1.0 - c.beta2.powi(mo.t as i32));
            let lr = F::of(lr);
            let grad = store.grad(p).expect("checked above").to_vec();
            let data = store.get_mut(p).data_mut();
            for i in 0..n {
                let g = grad[i];
                mo.m[i] = b1 * mo.m[i] + (F::one() - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (F::one() - b2) * g * g;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
