//! Named parameter collections.
//!
//! A [`ParamSet`] is the unit of checkpointing and optimization. Networks
//! look their weights up by name after binding the set onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Copies every entry of `other` into `self`, replacing clashes.
    pub fn merge(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Records every tensor as a leaf. Entries for which `trainable` is true
    /// require gradients; the rest are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for e in v.shape() {
                h.update((*e as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    /// Rebinds `name` to an existing tape variable.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    /// Gradients of every bound parameter that received one.
    pub fn collect(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self
                .vars
                .iter()
                .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g)))
                .collect(),
        }
    }
}

/// Gradient table keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.grads.insert(name.into(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum; accumulation over samples of a mini-batch.
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (k, g) in other.grads {
            match self.grads.get_mut(&k) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(k, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// He-normal initialization, `std = sqrt(2 / fan_in)`.
pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_any_bit() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let h1 = p.content_hash();
        p.get_mut("a").unwrap().data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_ne!(h1, p.content_hash());
    }

    #[test]
    fn frozen_binding_gets_no_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![2.0]));
        p.insert("frozen", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |n| n != "frozen");
        let w = b.get("w").unwrap();
        let f = b.get("frozen").unwrap();
        let y = tape.mul(w, f).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = b.collect(&tape.backward(loss).unwrap());
        assert_eq!(grads.get("w").unwrap().data(), &[3.0]);
        assert!(grads.get("frozen").is_none());
    }
}
