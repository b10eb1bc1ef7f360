//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use lvqa_tensor::{Graph, Real};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

/// Gradients of every trainable parameter registered on `g`.
pub fn collect_grads<T: Real>(g: &Graph<T>) -> Vec<(String, Vec<T>)> {
    g.param_grads()
        .into_iter()
        .filter_map(|(name, grad)| grad.map(|d| (name.to_string(), d.to_vec())))
        .collect()
}

/// Euclidean norm over every gradient buffer.
pub fn global_norm<T: Real>(grads: &[(String, Vec<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(String, Vec<T>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Vec<T>)]) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let one = T::one();
        let lr = T::from_f64_lossy(c.lr);
        let decay = one - T::from_f64_lossy(c.lr * c.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let eps = T::from_f64_lossy(c.eps);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != grad.len() {
                return Err(Error::Contract(format!("gradient of `{name}` has the wrong length")));
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
            });
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(grad).zip(&mut mo.m).zip(&mut mo.v) {
                *x = *x * decay;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
