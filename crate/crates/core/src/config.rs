//! Run configuration: model dimensions, variant selection and optimisation
//! hyperparameters. Everything is JSON with unknown keys rejected, and every
//! artifact records the hash of the configuration that produced it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Prepend a class-token row to the patch features (ViT style).
    pub class_token: bool,
    pub d_enc: usize,
    pub enc_heads: usize,
    pub enc_hidden: usize,
    /// Image query tokens in the feature compressor.
    pub n_iq: usize,
    /// Entity query tokens in the purification module.
    pub n_eq: usize,
    pub d_v: usize,
    pub compressor_heads: usize,
    /// Width of the learnable trigger layer's output.
    pub d_h: usize,
    pub d_llm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_hidden: usize,
    pub max_positions: usize,
    /// Vocabulary size used only when no tokenizer is available (paper-scale audits).
    pub declared_vocab: usize,
    pub purifier_heads: usize,
    pub ta1_max_len: usize,
    pub caption_max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
            class_token: false,
            d_enc: 64,
            enc_heads: 2,
            enc_hidden: 128,
            n_iq: 8,
            n_eq: 4,
            d_v: 32,
            compressor_heads: 1,
            d_h: 48,
            d_llm: 64,
            lm_layers: 2,
            lm_heads: 2,
            lm_hidden: 128,
            max_positions: 64,
            declared_vocab: 0,
            purifier_heads: 1,
            ta1_max_len: 24,
            caption_max_len: 24,
        }
    }

    /// The published dimensions: 224px input with 14px patches and a class token
    /// (257 × 1408 patch features), 32 × 768 visual features, 8 entity queries,
    /// a 1024-wide trigger and a 4096-wide language model.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            class_token: true,
            d_enc: 1408,
            enc_heads: 16,
            enc_hidden: 6144,
            n_iq: 32,
            n_eq: 8,
            d_v: 768,
            compressor_heads: 12,
            d_h: 1024,
            d_llm: 4096,
            lm_layers: 32,
            lm_heads: 32,
            lm_hidden: 11008,
            max_positions: 2048,
            declared_vocab: 32000,
            purifier_heads: 12,
            ta1_max_len: 160,
            caption_max_len: 160,
        }
    }

    /// Smallest configuration exercising every code path; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            class_token: false,
            d_enc: 8,
            enc_heads: 2,
            enc_hidden: 8,
            n_iq: 2,
            n_eq: 2,
            d_v: 8,
            compressor_heads: 2,
            d_h: 6,
            d_llm: 8,
            lm_layers: 1,
            lm_heads: 2,
            lm_hidden: 8,
            max_positions: 48,
            declared_vocab: 0,
            purifier_heads: 2,
            ta1_max_len: 4,
            caption_max_len: 8,
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        for (name, dim, heads) in [
            ("d_enc", self.d_enc, self.enc_heads),
            ("d_v", self.d_v, self.compressor_heads),
            ("d_v", self.d_v, self.purifier_heads),
            ("d_llm", self.d_llm, self.lm_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!("{name}={dim} not divisible by {heads} heads")));
            }
        }
        if self.n_iq == 0 || self.n_eq == 0 {
            return bad("query token counts must be positive");
        }
        if self.ta1_max_len == 0 || self.caption_max_len == 0 {
            return bad("generation lengths must be at least 1");
        }
        Ok(())
    }
}

/// Per-stage projector design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorVariant {
    /// One trainable `d_v → d_llm` linear per stage.
    L,
    /// One trainable `d_v → d_llm` linear shared by both stages.
    S,
    /// Two trainable linears `d_v → d_h → d_llm`.
    Dl,
    /// Trainable `d_v → d_h` feeding the frozen `d_h → d_llm` projector.
    Hdl,
    /// As `Hdl`, with the trainable trigger layer shared by both stages.
    Ours,
}

impl ProjectorVariant {
    pub fn is_shared(self) -> bool {
        matches!(self, Self::S | Self::Ours)
    }

    pub fn uses_frozen_layer(self) -> bool {
        matches!(self, Self::Hdl | Self::Ours)
    }
}

impl fmt::Display for ProjectorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::L => "L",
            Self::S => "S",
            Self::Dl => "DL",
            Self::Hdl => "HDL",
            Self::Ours => "Ours",
        };
        f.write_str(s)
    }
}

/// Projector choice for both trigger-augmented stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorPair {
    pub ta1: ProjectorVariant,
    pub ta2: ProjectorVariant,
}

impl ProjectorPair {
    pub const OURS: Self = Self::new(ProjectorVariant::Ours, ProjectorVariant::Ours);

    pub const fn new(ta1: ProjectorVariant, ta2: ProjectorVariant) -> Self {
        Self { ta1, ta2 }
    }

    /// The six rows of the projector comparison, in table order.
    pub fn table_rows() -> [(&'static str, Self); 6] {
        use ProjectorVariant::*;
        [
            ("l", Self::new(L, L)),
            ("s", Self::new(S, S)),
            ("dl", Self::new(Dl, Dl)),
            ("l-hdl", Self::new(L, Hdl)),
            ("hdl-l", Self::new(Hdl, L)),
            ("ours", Self::new(Ours, Ours)),
        ]
    }

    /// Shared variants must be selected for both stages.
    pub fn validate(&self) -> Result<()> {
        for v in [ProjectorVariant::S, ProjectorVariant::Ours] {
            if (self.ta1 == v) != (self.ta2 == v) {
                return Err(Error::Config(format!(
                    "projector {v} shares its layer across stages and must be used for both"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.ta1, self.ta2)
    }
}

impl FromStr for ProjectorPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::table_rows()
            .into_iter()
            .find(|(name, _)| *name == s.to_ascii_lowercase())
            .map(|(_, p)| p)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown projector variant `{s}` (expected ours|l|s|dl|l-hdl|hdl-l)"
                ))
            })
    }
}

/// How entity information is turned into entity features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purification {
    /// Frozen shared self-attention over `[T_e; F_v]`, then cross-attention to the entity text.
    Mp,
    /// Trainable self-attentions on each stream, visual rows query the entity text.
    Fusion,
    /// Trainable cross-attention from entity queries to the entity text only.
    Refine,
    /// Entity text embeddings are fed to the second stage unpurified.
    None,
}

impl FromStr for Purification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(Self::Mp),
            "fusion" => Ok(Self::Fusion),
            "refine" => Ok(Self::Refine),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown purification `{s}`"))),
        }
    }
}

impl fmt::Display for Purification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mp => "mp",
            Self::Fusion => "fusion",
            Self::Refine => "refine",
            Self::None => "none",
        })
    }
}

/// Architecture switches for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub projector: ProjectorPair,
    pub purification: Purification,
    /// Run the entity-information stage. Off means the second stage sees no generated text.
    pub ta1: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            projector: ProjectorPair::OURS,
            purification: Purification::Mp,
            ta1: true,
        }
    }
}

impl VariantConfig {
    /// Second stage only: no entity stage, no purification.
    pub fn baseline() -> Self {
        Self {
            ta1: false,
            purification: Purification::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        if !self.ta1 && matches!(self.purification, Purification::Fusion | Purification::Refine) {
            return Err(Error::Config(
                "fusion/refine purification needs the entity stage enabled".into(),
            ));
        }
        Ok(())
    }

    /// Whether the second stage receives an entity-feature block at all.
    pub fn has_entity_block(&self) -> bool {
        self.ta1 || self.purification != Purification::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub min_lr: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay for projector weights; query tokens never decay.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    /// Published schedule endpoints: 1e-4 peak, 8e-5 floor, one epoch.
    fn default() -> Self {
        Self {
            init_lr: 1e-4,
            min_lr: 8e-5,
            warmup_fraction: 0.05,
            epochs: 1,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: same 5:4 peak/floor ratio, larger step size and
    /// single-image batches so one short epoch can move a freshly initialised
    /// trigger layer.
    pub fn toy() -> Self {
        Self {
            init_lr: 5e-3,
            min_lr: 4e-3,
            batch_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr <= self.init_lr) || self.min_lr < 0.0 {
            return Err(Error::Config("require 0 <= min_lr <= init_lr".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> crate::training::LrSchedule {
        crate::training::LrSchedule::new(
            self.init_lr,
            self.min_lr,
            warmup_steps(self.warmup_fraction, total_steps),
            total_steps,
        )
    }
}

/// Rounded warmup length, always strictly below `total_steps` when `total_steps > 0`.
pub fn warmup_steps(fraction: f64, total_steps: usize) -> usize {
    let w = (fraction * total_steps as f64).round() as usize;
    w.min(total_steps.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    /// Probability that a caption-prompt example carries an entity block.
    pub entity_block_prob: f64,
    /// Per-word substitution rate in entity blocks, the chance the entity
    /// list is dropped and the chance it is swapped for another scene's.
    pub entity_noise: f64,
    /// Held-out next-token loss (nats per answer token) the run must reach.
    pub heldout_threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 8,
            init_lr: 3e-3,
            min_lr: 3e-4,
            warmup_fraction: 0.05,
            entity_block_prob: 0.5,
            entity_noise: 0.25,
            heldout_threshold: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretraining needs positive steps and batch_size".into()));
        }
        if !(0.0..=1.0).contains(&self.entity_block_prob) {
            return Err(Error::Config("entity_block_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.entity_noise) {
            return Err(Error::Config("entity_noise must lie in [0, 0.5]".into()));
        }
        if !(0.0 <= self.min_lr && self.min_lr <= self.init_lr) {
            return Err(Error::Config("require 0 <= min_lr <= init_lr".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub variant: VariantConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::toy(),
            variant: VariantConfig::default(),
            train: TrainConfig::toy(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.variant.validate()?;
        self.train.validate()?;
        self.pretrain.validate()
    }

    /// Stable hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of SHA-256 over the compact JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serialises");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = RunConfig::from_json(r#"{"model": {"d_vv": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("d_vv"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults_and_hash_is_stable() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "variant": {"purification": "refine"}}"#)
            .unwrap();
        assert_eq!(cfg.model, ModelConfig::toy());
        assert_eq!(cfg.variant.purification, Purification::Refine);
        assert_eq!(cfg.hash(), cfg.clone().hash());
        let other = RunConfig { seed: 10, ..cfg.clone() };
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn shared_variant_on_one_stage_only_is_invalid() {
        let pair = ProjectorPair::new(ProjectorVariant::Ours, ProjectorVariant::Hdl);
        assert!(pair.validate().is_err());
        assert!("l-hdl".parse::<ProjectorPair>().unwrap().validate().is_ok());
        assert!("bogus".parse::<ProjectorPair>().is_err());
    }

    #[test]
    fn paper_dims_declare_published_patch_grid() {
        let p = ModelConfig::paper();
        assert_eq!((p.n_patches(), p.d_enc), (257, 1408));
        assert_eq!(ModelConfig::toy().n_patches(), 4);
    }
}
