//! Named parameter collections in a fixed canonical order.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names, same shapes, same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// Feed every parameter into `hasher` as name, shape and value bytes.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        for (name, t) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update(t.le_bytes());
        }
    }

    /// Put every parameter on the tape, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, T> {
        let vars = self
            .entries
            .values()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A parameter set's tape handles.
pub struct Bound<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .entries
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// `(name, var)` pairs in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.set.names().zip(self.vars.iter().copied())
    }
}

pub(crate) fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v * std)
    })
}

pub(crate) fn scaled_normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v * std)
    })
}
