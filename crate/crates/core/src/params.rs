//! Named parameter storage with gradient buffers and frozen prefixes.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered map from dotted path (`projector.smiles.latents`) to parameter.
///
/// Iteration order is lexicographic so checkpoints and updates are
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    frozen: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name, which is always
    /// a model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let prev = self.params.insert(
            name.clone(),
            Param {
                value: Arc::new(value),
                grad: None,
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Registers a Gaussian-initialised parameter.
    pub fn init_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    /// Mutable access to a value; copies if a tape still shares it.
    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Excludes every parameter whose name starts with `prefix` from
    /// updates. The prefix must match at least one parameter.
    pub fn freeze(&mut self, prefix: &str) -> Result<()> {
        if !self.params.keys().any(|k| k.starts_with(prefix)) {
            return Err(Error::UnmatchedFreeze(prefix.to_string()));
        }
        if !self.frozen.iter().any(|f| f == prefix) {
            self.frozen.push(prefix.to_string());
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_prefixes(&self) -> &[String] {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != grad.shape() && p.value.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: p.value.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(Tensor::from_vec(p.value.shape(), grad.data().to_vec())?);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Sum of squared gradient entries across all parameters.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum()
    }

    /// Converts every value to another precision (gradients are dropped).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            grad: None,
                        },
                    )
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}
