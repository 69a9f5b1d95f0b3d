//! On-disk checkpoints: `manifest.json` + `weights.bin` + `vocab.json`.
//!
//! `weights.bin` is every parameter as little-endian `f32`, concatenated in
//! manifest order. Parameters are kept on the `f32` grid in memory, so a
//! save/load round trip is bit-exact.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_bytes: u64,
    pub numel: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Backbone,
    Tpcap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
    pub frozen_names: Vec<String>,
    /// SHA-256 of `weights.bin`.
    pub checksum: String,
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

/// Tensors read back from disk, keyed by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: HashMap<String, Matrix>,
    pub tokenizer: Tokenizer,
}

fn weights_blob(store: &ParamStore) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        entries.push(TensorEntry {
            name: p.name().to_string(),
            shape: vec![p.shape().0, p.shape().1],
            offset_bytes: blob.len() as u64,
            numel: p.numel() as u64,
        });
        for v in p.value().data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    (blob, entries)
}

pub fn save_checkpoint(
    dir: &Path,
    kind: CheckpointKind,
    config: &RunConfig,
    store: &ParamStore,
    tokenizer: &Tokenizer,
    metrics: serde_json::Map<String, serde_json::Value>,
) -> Result<Manifest> {
    if store.is_meta() {
        return Err(Error::Input("cannot save a shape-only parameter store".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (blob, tensors) = weights_blob(store);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        config_hash: config.hash(),
        seed: config.seed,
        config: config.clone(),
        tensors,
        frozen_names: store
            .iter()
            .filter(|(_, p)| !p.trainable())
            .map(|(_, p)| p.name().to_string())
            .collect(),
        checksum: hex::encode(Sha256::digest(&blob)),
        metrics,
    };
    let wpath = dir.join(WEIGHTS_FILE);
    std::fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    tokenizer.save(&dir.join(VOCAB_FILE))?;
    Ok(manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corruption(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.checksum {
        return Err(Error::Corruption("weights.bin does not match manifest checksum".into()));
    }
    let mut tensors = HashMap::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for t in &manifest.tensors {
        let (rows, cols) = match t.shape[..] {
            [r, c] => (r, c),
            _ => return Err(Error::Corruption(format!("`{}` is not 2-D", t.name))),
        };
        if t.numel != (rows * cols) as u64 || t.offset_bytes != expected_offset {
            return Err(Error::Corruption(format!("inconsistent table entry for `{}`", t.name)));
        }
        let start = t.offset_bytes as usize;
        let end = start + 4 * t.numel as usize;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Corruption(format!("`{}` runs past end of weights", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if tensors
            .insert(t.name.clone(), Matrix::from_vec(rows, cols, data)?)
            .is_some()
        {
            return Err(Error::Corruption(format!("`{}` listed twice", t.name)));
        }
        expected_offset = end as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Corruption("weights.bin has trailing bytes".into()));
    }
    let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
    Ok(Checkpoint {
        manifest,
        tensors,
        tokenizer,
    })
}

impl Checkpoint {
    /// Copies every tensor into a freshly built store with identical names and
    /// shapes. Missing, extra or reshaped tensors, or a different freeze set,
    /// mean the checkpoint does not belong to this architecture.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Corruption(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name().to_string())).collect();
        for (id, name) in ids {
            let value = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Corruption(format!("tensor `{name}` missing")))?;
            store
                .set_value(id, value.clone())
                .map_err(|e| Error::Corruption(e.to_string()))?;
        }
        let frozen: Vec<String> = store
            .iter()
            .filter(|(_, p)| !p.trainable())
            .map(|(_, p)| p.name().to_string())
            .collect();
        if frozen != self.manifest.frozen_names {
            return Err(Error::Corruption("frozen parameter set differs from manifest".into()));
        }
        Ok(())
    }
}
