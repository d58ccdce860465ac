use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{GradTape, Gradients, Tensor, Var};
use crate::{Error, Result};

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(
                "param store",
                format!("duplicate parameter `{name}`"),
            ));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalars in tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// Lazily places store tensors on a tape, once per name.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters under these name prefixes are bound as constants.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen.extend(prefixes.iter().map(|p| p.to_string()));
        self
    }

    /// Uses an existing tape value for `name` instead of the stored tensor.
    pub fn preset(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut GradTape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            tape.constant(t)
        } else {
            tape.param(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound, trainable parameter, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}
