//! Named parameter storage with per-array gradient slots.

use std::collections::HashMap;

use crate::error::{arg_err, Result};
use crate::tensor::data::{Real, TensorData};

/// One learnable (or stateful) array and its gradient.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: TensorData<T>,
    pub grad: TensorData<T>,
}

/// Ordered collection of named arrays. Iteration order is insertion order,
/// which fixes the checkpoint layout and makes training deterministic.
///
/// Besides learnable weights this also holds batch-norm running statistics;
/// those entries are never touched by the tape, so their gradients stay zero
/// and optimizer updates leave them unchanged.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    pub rng_seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new(), rng_seed }
    }

    pub fn insert(&mut self, name: &str, value: TensorData<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(arg_err("param_store", format!("duplicate parameter name {name:?}")));
        }
        let grad = TensorData::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry<T> {
        &mut self.entries[idx]
    }

    pub fn get(&self, name: &str) -> Result<&TensorData<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| arg_err("param_store", format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorData<T>> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| arg_err("param_store", format!("unknown parameter {name:?}")))?;
        Ok(&mut self.entries[idx].value)
    }

    pub fn grad(&self, name: &str) -> Result<&TensorData<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].grad)
            .ok_or_else(|| arg_err("param_store", format!("unknown parameter {name:?}")))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamEntry<T>> {
        self.entries.iter()
    }

    /// Total number of scalar elements across all entries.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new(self.rng_seed);
        for e in &self.entries {
            out.insert(&e.name, e.value.cast()).expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut s: ParamStore<f32> = ParamStore::new(0);
        s.insert("b", TensorData::zeros(&[2])).unwrap();
        s.insert("a", TensorData::zeros(&[3])).unwrap();
        let names: Vec<_> = s.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(s.total_elements(), 5);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f32> = ParamStore::new(0);
        s.insert("w", TensorData::zeros(&[1])).unwrap();
        assert!(s.insert("w", TensorData::zeros(&[1])).is_err());
    }

    #[test]
    fn grad_shape_matches_value() {
        let mut s: ParamStore<f64> = ParamStore::new(7);
        s.insert("w", TensorData::zeros(&[2, 3])).unwrap();
        assert_eq!(s.grad("w").unwrap().shape(), &[2, 3]);
    }
}
