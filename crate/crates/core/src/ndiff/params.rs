//! Named parameter collection with gradient accumulators.

use std::collections::HashMap;

use super::tensor::Tensor;
use super::NdiffError;

/// Ordered collection of named parameters, each paired with a gradient
/// accumulator of identical shape. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        assert!(value.all_finite(), "parameter '{name}' has non-finite entries");
        self.index.insert(name.clone(), self.names.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.names.push(name);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn lookup(&self, name: &str) -> Result<usize, NdiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NdiffError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_by_name(&self, name: &str) -> Result<&Tensor, NdiffError> {
        Ok(&self.values[self.lookup(name)?])
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn grad(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    pub fn grad_by_name(&self, name: &str) -> Result<&Tensor, NdiffError> {
        Ok(&self.grads[self.lookup(name)?])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn accumulate_grad(&mut self, idx: usize, g: &Tensor) {
        self.grads[idx].add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Snapshot as (name, value) pairs, in insertion order.
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// True when both stores hold identical names, shapes and order.
    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}
