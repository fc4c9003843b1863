use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::real::{real, Real};
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter tensors, ordered by name. Names are dotted namespaces such as
/// `encoder.conv1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param { value, trainable: true });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn has_namespace(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copies of the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts or overwrites every parameter of `other`.
    pub fn merge(&mut self, other: Self) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the raw values of parameters under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter on `tape`; trainable ones require gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |p| p.trainable)
    }

    /// Records every parameter as a gradient-requiring leaf regardless of its flag.
    pub fn bind_all(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |_| false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, requires: impl Fn(&Param<T>) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), requires(p))))
            .collect();
        Bound { vars }
    }
}

/// Parameter name → tape handle for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    /// Collects the gradient of every bound parameter that received one.
    pub fn gradients<T: Real>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// He/Kaiming uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| real(rng.random_range(-bound..bound)))
}

pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| real(dist.sample(rng)))
}
