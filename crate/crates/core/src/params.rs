//! Named parameter storage and initializers.

use std::collections::BTreeMap;
use std::sync::Arc;

use lvqa_tensor::{Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Parameters keyed by dotted name. Tensors are reference counted so a
/// forward graph can borrow them without copying; the optimizer mutates them
/// between steps once every graph has been dropped.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a trainable tensor, replacing any previous value.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(t.with_requires_grad()));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Mutable access for the optimizer. Clones the buffer only if a graph
    /// still holds a reference.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Excludes (or re-includes) a parameter from gradient updates.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.set_requires_grad(trainable);
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)?.requires_grad())
    }

    /// Overwrites the values of `name`, keeping its trainability.
    pub fn assign(&mut self, name: &str, values: &[T]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.numel() != values.len() {
            return Err(Error::Contract(format!(
                "parameter `{name}` has {} values, got {}",
                t.numel(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.tensors.remove(name)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let mut t = v.cast::<U>();
                t.set_requires_grad(v.requires_grad());
                (k.clone(), Arc::new(t))
            })
            .collect();
        ParamStore { tensors }
    }
}

/// Weight initializers driven by a caller-owned RNG.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(self.rng)))
    }

    /// Xavier-uniform for a `[fan_in, fan_out]` matrix.
    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(&[fan_in, fan_out], |_| T::from_f64_lossy(self.rng.random_range(-a..a)))
    }

    /// He-normal for a conv kernel `[c_out, c_in, k, k]`.
    pub fn he_conv<T: Real>(&mut self, c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.normal(&[c_out, c_in, k, k], std)
    }
}
