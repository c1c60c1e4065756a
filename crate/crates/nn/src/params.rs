//! Named parameter storage with per-parameter ADAM state.

use crate::error::{NnError, Result};
use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    /// First/second ADAM moments, allocated on first optimizer touch.
    pub(crate) m: Option<Tensor<T>>,
    pub(crate) v: Option<Tensor<T>>,
}

/// Map from string path to parameter tensor. Iteration order is the sorted
/// path order (BTreeMap), which keeps optimizer sweeps and serialization
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    step: u64,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(
            path.into(),
            ParamEntry {
                value,
                trainable,
                m: None,
                v: None,
            },
        );
    }

    pub fn get(&self, path: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(path)
            .ok_or_else(|| NnError::InvalidArgument(format!("no parameter at path {path:?}")))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(path)?.value)
    }

    pub fn value_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(path)
            .map(|e| &mut e.value)
            .ok_or_else(|| NnError::InvalidArgument(format!("no parameter at path {path:?}")))
    }

    pub(crate) fn entry_mut(&mut self, path: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| NnError::InvalidArgument(format!("no parameter at path {path:?}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Optimizer step count, shared across all parameters of this store.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Mark every parameter under `prefix` as non-trainable.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (path, entry) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                entry.trainable = false;
            }
        }
    }

    /// Copy all entries of `other` under this store, preserving trainability.
    pub fn absorb(&mut self, other: &ParamStore<T>) {
        for (path, entry) in other.entries.iter() {
            self.entries.insert(path.clone(), entry.clone());
        }
    }

    /// Total number of scalar parameters (trainable only).
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}
