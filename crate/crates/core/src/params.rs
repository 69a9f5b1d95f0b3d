//! Named parameter storage and the freeze policy.
//!
//! Every weight of a model lives in exactly one [`ParamStore`] slot. Layers keep
//! [`ParamId`] handles into the store, so two layers holding the same id are
//! physically the same tensor (this is how projector sharing is expressed).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    shape: (usize, usize),
    value: Matrix,
    trainable: bool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1
    }
}

/// Owner of all model weights.
///
/// A store built with [`ParamStore::meta`] records names and shapes without
/// allocating, which lets paper-scale configurations be audited on a laptop.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    meta: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta() -> Self {
        Self {
            meta: true,
            ..Self::default()
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = if self.meta {
            Matrix::zeros(0, 0)
        } else {
            let mut m = match init {
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::filled(rows, cols, 1.0),
                Init::Normal(std) => Matrix::randn(rows, cols, std, rng),
            };
            m.round_to_f32();
            m
        };
        self.insert(name, (rows, cols), value, trainable)
    }

    /// Registers an explicit value (rounded onto the `f32` grid).
    pub fn add_value(&mut self, name: &str, mut value: Matrix, trainable: bool) -> Result<ParamId> {
        let shape = value.shape();
        value.round_to_f32();
        self.insert(name, shape, value, trainable)
    }

    fn insert(
        &mut self,
        name: &str,
        shape: (usize, usize),
        value: Matrix,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape,
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    /// Overwrites a value in place, keeping it on the `f32` grid.
    pub fn set_value(&mut self, id: ParamId, mut value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.shape {
            return Err(Error::Shape(format!(
                "`{}` expects {:?}, got {:?}",
                p.name,
                p.shape,
                value.shape()
            )));
        }
        value.round_to_f32();
        p.value = value;
        Ok(())
    }

    /// Raw mutable access without rounding; used by finite-difference checks.
    pub fn value_mut_unrounded(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn registry(&self) -> ParameterRegistry {
        ParameterRegistry {
            entries: self
                .params
                .iter()
                .map(|p| RegistryEntry {
                    name: p.name.clone(),
                    shape: vec![p.shape.0, p.shape.1],
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// SHA-256 over the names, shapes and `f32` bytes of the frozen parameters.
    pub fn frozen_checksum(&self) -> String {
        self.checksum_where(|p| !p.trainable)
    }

    pub fn checksum_where(&self, keep: impl Fn(&Param) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            hasher.update(p.name.as_bytes());
            hasher.update((p.shape.0 as u64).to_le_bytes());
            hasher.update((p.shape.1 as u64).to_le_bytes());
            for v in p.value.data() {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl RegistryEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Flat listing of every parameter with its freeze flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ParameterRegistry {
    pub fn trainable_total(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(RegistryEntry::numel)
            .sum()
    }

    pub fn frozen_total(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| !e.trainable)
            .map(RegistryEntry::numel)
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("w", 2, 2, Init::Zeros, true, &mut rng).unwrap();
        assert!(store.add("w", 2, 2, Init::Zeros, true, &mut rng).is_err());
    }

    #[test]
    fn meta_store_records_shapes_only() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::meta();
        let id = store
            .add("big", 4096, 4096, Init::Normal(0.02), false, &mut rng)
            .unwrap();
        assert_eq!(store.param(id).shape(), (4096, 4096));
        assert_eq!(store.value(id).shape(), (0, 0));
        assert_eq!(store.registry().frozen_total(), 4096 * 4096);
    }

    #[test]
    fn frozen_checksum_ignores_trainable_changes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("frozen", 3, 3, Init::Normal(1.0), false, &mut rng).unwrap();
        let t = store.add("train", 3, 3, Init::Normal(1.0), true, &mut rng).unwrap();
        let before = store.frozen_checksum();
        store.set_value(t, Matrix::filled(3, 3, 0.5)).unwrap();
        assert_eq!(before, store.frozen_checksum());
    }
}
