//! Named parameter tensors and aligned gradient maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// One named tensor; non-trainable entries (running statistics, EMA shadows)
/// never receive gradients or optimizer updates.
#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors with canonical (sorted) iteration order.
/// Names are unique; shapes are fixed after creation.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.insert_with(name, tensor, true);
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor) {
        self.insert_with(name, tensor, false);
    }

    fn insert_with(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        let prev = self.map.insert(name.to_string(), Param { tensor, trainable });
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .tensor
    }

    /// Replace the contents of an existing entry; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let p = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(p.tensor.shape(), tensor.shape(), "set() shape for `{name}`");
        p.tensor = tensor;
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.map.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    /// Sorted iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Sorted names of trainable tensors.
    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn total_elems(&self) -> usize {
        self.map.values().map(|p| p.tensor.numel()).sum()
    }

    /// Total scalar count over names matching a prefix.
    pub fn elems_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Names matching a prefix, sorted.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Every tensor finite (the post-step invariant).
    pub fn all_finite(&self) -> Result<()> {
        for (name, p) in &self.map {
            if !p.tensor.is_finite() {
                return Err(Error::NonFiniteLoss(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`]; keys are a subset of the store's
/// trainable names and shapes match the parameters.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    map: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or elementwise-accumulate.
    pub fn accumulate(&mut self, name: &str, grad: Tensor) {
        match self.map.get_mut(name) {
            Some(g) => {
                assert_eq!(g.shape(), grad.shape(), "grad shape for `{name}`");
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm across every gradient tensor.
    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// First non-finite entry, if any.
    pub fn non_finite_entry(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }
}
