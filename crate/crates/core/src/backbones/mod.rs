//! Frozen backbones: vision encoder, feature compressor, causal language
//! model, the frozen vision-to-language layer and the frozen `mp` purifier
//! parts, plus in-repo pretraining.

mod compressor;
mod lm;
mod pretrain;
mod vision;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use compressor::{Compressor, VisualFeatures};
pub use lm::LanguageModel;
pub use pretrain::{pretrain_backbone, ExampleSampler, PretrainExample, PretrainReport};
pub use vision::{PatchFeatures, VisionEncoder};

use crate::checkpoint::{read_checkpoint, save_checkpoint, CheckpointKind};
use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, RunConfig};
use crate::data::{read_ppm, CaptionCorpus};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::purification::{EntityEncoder, MpAttention};
use crate::tokenizer::Tokenizer;

/// Name of the seeded frozen `d_h → d_llm` layer shared by every trigger projector.
pub const BRIDGE_NAME: &str = "projector.frozen";

/// One image with cached patch features, its references and entity phrases.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub image_id: u64,
    pub patches: PatchFeatures,
    pub references: Vec<Vec<String>>,
    pub entities: Vec<String>,
}

/// Handles into a [`ParamStore`] for the three backbone networks.
#[derive(Debug, Clone)]
pub struct BackboneModules {
    pub encoder: VisionEncoder,
    pub compressor: Compressor,
    pub lm: LanguageModel,
    /// `d_v → d_h` layer used only while pretraining; frozen and unused afterwards.
    pub adapter: Linear,
    /// Seeded frozen `d_h → d_llm` layer; never trained.
    pub bridge: Linear,
    /// Entity text to `d_v` rows, shared with the captioner.
    pub entity_encoder: EntityEncoder,
    /// Attention of the `mp` purifier, learned during pretraining.
    pub mp: MpAttention,
    /// Entity queries learned during pretraining; initial value of the
    /// captioner's trainable `mp` queries.
    pub entity_queries: ParamId,
}

impl BackboneModules {
    /// Registers all backbone parameters. Only the image query tokens are trainable.
    pub fn build<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        vocab: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: VisionEncoder::new(store, rng, cfg)?,
            compressor: Compressor::new(store, rng, cfg)?,
            lm: LanguageModel::new(store, rng, cfg, vocab)?,
            adapter: Linear::new(
                store,
                rng,
                "pretrain.adapter",
                cfg.d_v,
                cfg.d_h,
                1.0 / (cfg.d_v as f64).sqrt(),
                false,
            )?,
            bridge: Linear::new(
                store,
                rng,
                BRIDGE_NAME,
                cfg.d_h,
                cfg.d_llm,
                1.0 / (cfg.d_h as f64).sqrt(),
                false,
            )?,
            entity_encoder: EntityEncoder::new(store, rng, cfg)?,
            mp: MpAttention::new(store, rng, cfg)?,
            entity_queries: store.add(
                "pretrain.entity_query_tokens",
                cfg.n_eq,
                cfg.d_v,
                Init::Normal(1.0),
                false,
                rng,
            )?,
        })
    }

    /// Visual rows in language-model space as seen during pretraining:
    /// compressor, adapter, frozen bridge.
    pub fn pretrain_visual_rows(&self, g: &mut Graph, patches: &PatchFeatures) -> Result<Var> {
        let p = g.constant(patches.0.clone());
        let fv = self.compressor.forward(g, p)?;
        Ok(self.to_lm_space(g, fv))
    }

    /// `d_v` rows into language-model space through the adapter and bridge.
    pub fn to_lm_space(&self, g: &mut Graph, rows: Var) -> Var {
        let h = self.adapter.forward(g, rows);
        self.bridge.forward(g, h)
    }
}

/// Backbone weights together with the vocabulary they were trained on.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: RunConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub modules: BackboneModules,
}

impl Backbone {
    /// Seeded random initialisation; the language model head starts at zero.
    pub fn init(config: &RunConfig, tokenizer: Tokenizer) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let modules = BackboneModules::build(&mut store, &mut rng, &config.model, tokenizer.vocab_size())?;
        Ok(Self {
            config: config.clone(),
            tokenizer,
            store,
            modules,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.config.model
    }

    /// Reads and encodes every image of `corpus` once; the encoder is frozen.
    pub fn encode_corpus(&self, corpus: &CaptionCorpus) -> Result<Vec<EncodedSample>> {
        corpus
            .records
            .iter()
            .map(|r| {
                Ok(EncodedSample {
                    image_id: r.image_id,
                    patches: self.modules.encoder.encode_image(&self.store, &read_ppm(&r.image_path)?)?,
                    references: r.references.clone(),
                    entities: r.entity_list.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, metrics: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        save_checkpoint(
            dir,
            CheckpointKind::Backbone,
            &self.config,
            &self.store,
            &self.tokenizer,
            metrics,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = read_checkpoint(dir)?;
        if ck.manifest.kind != CheckpointKind::Backbone {
            return Err(Error::Input(format!(
                "{} is not a backbone checkpoint",
                dir.display()
            )));
        }
        let mut backbone = Self::init(&ck.manifest.config, ck.tokenizer.clone())?;
        ck.restore_into(&mut backbone.store)?;
        Ok(backbone)
    }
}
