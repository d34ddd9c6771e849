use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Mutable access; clones the tensor if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name).map(Arc::unwrap_or_clone)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &Graph) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                .collect(),
        }
    }

    /// Same-named zero tensors.
    pub fn zeros_like(&self) -> ParamStore {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(Tensor::zeros(v.shape()))))
                .collect(),
        }
    }

    /// Adds `other` into `self`, name by name. Both stores must have the same names.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (k, v) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                Arc::make_mut(v).add_assign(o);
            }
        }
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Graph leaves for the tensors of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter; untouched parameters get zeros.
    pub fn grads(&self, graph: &Graph, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &var) in &self.vars {
            let g = graph
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(params.get(name).map(Tensor::shape).unwrap_or(&[])));
            out.insert(name.clone(), g);
        }
        out
    }
}
