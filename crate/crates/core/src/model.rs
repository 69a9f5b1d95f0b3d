//! The full captioner: frozen backbones, trigger projector, entity stage,
//! purification and caption stage, all in one parameter store.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
pub use crate::backbones::EncodedSample;
use crate::backbones::{Backbone, BackboneModules, PatchFeatures, VisualFeatures};
use crate::checkpoint::{read_checkpoint, save_checkpoint, CheckpointKind, Manifest};
use crate::config::{ModelConfig, Purification, RunConfig, VariantConfig};
use crate::data::{read_ppm, CaptionCorpus, RgbImage};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParameterRegistry};
use crate::pipeline::{assemble, assemble_prompt, greedy_decode, PromptTemplate, StoredLm};
use crate::projector::{ProjectorConfig, Stage, TriggerProjector};
use crate::purification::{EntityEncoder, EntityFeatures, EntityInfo, Purifier};
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, EOS};

/// Parameters the optimiser updates for `variant`: the projector layers of
/// the active stages, the image query tokens, and whatever the purification
/// variant adds.
pub fn model_trainable_count(model: &ModelConfig, variant: &VariantConfig) -> u64 {
    let proj = ProjectorConfig::from_model(model, variant.projector);
    proj.projector_params(&active_stages(variant))
        + (model.n_iq * model.d_v) as u64
        + Purifier::trainable_count(model, variant.purification)
}

fn active_stages(variant: &VariantConfig) -> Vec<Stage> {
    if variant.ta1 {
        vec![Stage::Ta1, Stage::Ta2]
    } else {
        vec![Stage::Ta2]
    }
}

/// Output of captioning one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionOutput {
    pub entity_info: EntityInfo,
    pub entity_text: String,
    pub caption_ids: Vec<u32>,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct TpCap {
    pub config: RunConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub backbone: BackboneModules,
    pub projector: TriggerProjector,
    pub entity_encoder: Option<EntityEncoder>,
    pub purifier: Purifier,
}

struct Heads {
    projector: TriggerProjector,
    entity_encoder: Option<EntityEncoder>,
    purifier: Purifier,
}

fn build_heads(store: &mut ParamStore, backbone: &BackboneModules, cfg: &RunConfig) -> Result<Heads> {
    cfg.variant.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let proj_cfg = ProjectorConfig::from_model(&cfg.model, cfg.variant.projector);
    let projector =
        TriggerProjector::with_frozen(store, &mut rng, &proj_cfg, &active_stages(&cfg.variant), Some(backbone.bridge))?;
    let entity_encoder = cfg.variant.has_entity_block().then_some(backbone.entity_encoder);
    let purifier = Purifier::with_mp(store, &mut rng, &cfg.model, cfg.variant.purification, Some(backbone.mp))?;
    // Entity queries start from their pretrained values.
    if let (Purifier::Mp { queries, .. } | Purifier::Refine { queries, .. }, false) = (purifier, store.is_meta()) {
        let init = store.value(backbone.entity_queries).clone();
        store.set_value(queries, init)?;
    }
    Ok(Heads {
        projector,
        entity_encoder,
        purifier,
    })
}

impl TpCap {
    /// Adds the captioning heads to a backbone. `config.model` must equal the
    /// backbone's model configuration.
    pub fn from_backbone(backbone: Backbone, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if config.model != backbone.config.model {
            return Err(Error::Config("run and backbone model configurations differ".into()));
        }
        let Backbone {
            tokenizer,
            mut store,
            modules,
            ..
        } = backbone;
        let heads = build_heads(&mut store, &modules, config)?;
        Ok(Self {
            config: config.clone(),
            tokenizer,
            store,
            backbone: modules,
            projector: heads.projector,
            entity_encoder: heads.entity_encoder,
            purifier: heads.purifier,
        })
    }

    /// Names and shapes only, for configurations too large to allocate.
    pub fn meta_registry(model: &ModelConfig, variant: &VariantConfig) -> Result<ParameterRegistry> {
        let cfg = RunConfig {
            model: model.clone(),
            variant: *variant,
            ..RunConfig::default()
        };
        let mut store = ParamStore::meta();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let modules = BackboneModules::build(&mut store, &mut rng, model, model.declared_vocab)?;
        build_heads(&mut store, &modules, &cfg)?;
        Ok(store.registry())
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.config.model
    }

    pub fn variant(&self) -> &VariantConfig {
        &self.config.variant
    }

    pub fn registry(&self) -> ParameterRegistry {
        self.store.registry()
    }

    pub fn save(&self, dir: &Path, metrics: serde_json::Map<String, serde_json::Value>) -> Result<Manifest> {
        save_checkpoint(
            dir,
            CheckpointKind::Tpcap,
            &self.config,
            &self.store,
            &self.tokenizer,
            metrics,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = read_checkpoint(dir)?;
        if ck.manifest.kind != CheckpointKind::Tpcap {
            return Err(Error::Input(format!(
                "{} is not a captioner checkpoint",
                dir.display()
            )));
        }
        let cfg = &ck.manifest.config;
        let backbone = Backbone::init(cfg, ck.tokenizer.clone())?;
        let mut model = Self::from_backbone(backbone, cfg)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }

    fn lm(&self) -> StoredLm<'_> {
        StoredLm {
            lm: &self.backbone.lm,
            store: &self.store,
        }
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<PatchFeatures> {
        self.backbone.encoder.encode_image(&self.store, image)
    }

    pub fn visual_features(&self, patches: &PatchFeatures) -> Result<VisualFeatures> {
        self.backbone.compressor.compress_features(&self.store, patches)
    }

    /// One trigger-augmented stage: project `blocks` (each `rows × d_v`) with
    /// the stage's projector, splice them into `template` and decode greedily.
    pub fn run_stage(
        &self,
        template: &PromptTemplate,
        blocks: &[&Matrix],
        stage: Stage,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let features = Matrix::concat_rows(blocks)?;
        let projected = self.projector.project(&self.store, stage, &[features])?;
        let prompt = assemble_prompt(&self.store, &self.backbone.lm, &self.tokenizer, template, &projected)?;
        greedy_decode(&self.lm(), &prompt, max_len)
    }

    /// `I_e = LLM(F_v ⊕ LP1)`.
    pub fn ta1_generate(&self, fv: &VisualFeatures) -> Result<EntityInfo> {
        let ids = self.run_stage(&PromptTemplate::lp1(), &[&fv.0], Stage::Ta1, self.config.model.ta1_max_len)?;
        Ok(EntityInfo(ids))
    }

    /// Entity text rows in `d_v`; one null row when the text is empty.
    pub fn embed_entity_info(&self, info: &EntityInfo) -> Result<Matrix> {
        let enc = self
            .entity_encoder
            .ok_or_else(|| Error::Config("variant has no entity block".into()))?;
        enc.embed_entity_info(&self.store, &self.backbone.lm, info)
    }

    /// The block placed after `F_v` in the caption prompt, if the variant has one.
    pub fn entity_block(&self, fv: &VisualFeatures, info: &EntityInfo) -> Result<Option<EntityFeatures>> {
        if !self.config.variant.has_entity_block() {
            return Ok(None);
        }
        let rows = self.embed_entity_info(info)?;
        Ok(Some(self.purifier.purify(&self.store, fv, &rows)?))
    }

    /// `LLM(F_v ⊕ F_e ⊕ LP2)`.
    pub fn ta2_generate(&self, fv: &VisualFeatures, fe: Option<&EntityFeatures>) -> Result<Vec<u32>> {
        let mut blocks = vec![&fv.0];
        if let Some(fe) = fe {
            blocks.push(&fe.0);
        }
        self.run_stage(&PromptTemplate::lp2(), &blocks, Stage::Ta2, self.config.model.caption_max_len)
    }

    pub fn caption_patches(&self, patches: &PatchFeatures) -> Result<CaptionOutput> {
        let fv = self.visual_features(patches)?;
        let info = if self.config.variant.ta1 {
            self.ta1_generate(&fv)?
        } else {
            EntityInfo::default()
        };
        let fe = self.entity_block(&fv, &info)?;
        let caption_ids = self.ta2_generate(&fv, fe.as_ref())?;
        Ok(CaptionOutput {
            entity_text: self.tokenizer.decode(&info.0),
            entity_info: info,
            caption: self.tokenizer.decode(&caption_ids),
            caption_ids,
        })
    }

    /// Image → caption: encode, compress, entity stage, purification, caption stage.
    pub fn caption_image(&self, image: &RgbImage) -> Result<CaptionOutput> {
        self.caption_patches(&self.encode_image(image)?)
    }

    /// Reads and encodes every image of `corpus` once.
    pub fn encode_corpus(&self, corpus: &CaptionCorpus) -> Result<Vec<EncodedSample>> {
        corpus
            .records
            .iter()
            .map(|r| {
                Ok(EncodedSample {
                    image_id: r.image_id,
                    patches: self.encode_image(&read_ppm(&r.image_path)?)?,
                    references: r.references.clone(),
                    entities: r.entity_list.clone(),
                })
            })
            .collect()
    }

    /// Caption token ids used as the training target: first reference plus `<eos>`.
    pub fn target_ids(&self, sample: &EncodedSample) -> Result<Vec<u32>> {
        let words = sample
            .references
            .first()
            .ok_or_else(|| Error::Input(format!("image {} has no reference", sample.image_id)))?;
        let mut ids = self.tokenizer.encode_tokens(words);
        if ids.len() > self.config.model.caption_max_len {
            return Err(Error::Input(format!(
                "caption of image {} has {} tokens, limit {}",
                sample.image_id,
                ids.len(),
                self.config.model.caption_max_len
            )));
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Teacher-forced caption loss of one sample as a graph node. `info` is
    /// the entity text decoded beforehand; no gradient flows through decoding.
    pub fn caption_loss_graph(
        &self,
        g: &mut Graph,
        patches: &PatchFeatures,
        info: &EntityInfo,
        caption_ids: &[u32],
    ) -> Result<Var> {
        let p = g.constant(patches.0.clone());
        let fv = self.backbone.compressor.forward(g, p)?;
        let mut blocks = vec![fv];
        if self.config.variant.has_entity_block() {
            let enc = self.entity_encoder.expect("entity encoder exists with an entity block");
            let rows = enc.forward(g, &self.backbone.lm, info)?;
            blocks.push(self.purifier.forward(g, fv, rows)?);
        }
        let features = if blocks.len() == 1 {
            blocks[0]
        } else {
            g.concat_rows(&blocks)
        };
        let projected = self.projector.forward(g, Stage::Ta2, features)?;
        let (prefix, suffix) = PromptTemplate::lp2().token_ids(&self.tokenizer);
        let (prompt, _) = assemble(g, &self.backbone.lm, &prefix, projected, &suffix)?;
        crate::training::caption_loss_graph(g, &self.backbone.lm, prompt, caption_ids)
    }

    /// Scalar loss of one sample with the current weights.
    pub fn caption_loss(&self, sample: &EncodedSample) -> Result<f64> {
        let info = self.entity_info_for(&sample.patches)?;
        let ids = self.target_ids(sample)?;
        let mut g = Graph::inference(&self.store);
        let loss = self.caption_loss_graph(&mut g, &sample.patches, &info, &ids)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Entity text the first stage produces for `patches` (empty when it is disabled).
    pub fn entity_info_for(&self, patches: &PatchFeatures) -> Result<EntityInfo> {
        if !self.config.variant.ta1 {
            return Ok(EntityInfo::default());
        }
        self.ta1_generate(&self.visual_features(patches)?)
    }

    pub fn purification(&self) -> Purification {
        self.purifier.kind()
    }
}

/// Path of the image that `image_id` names in `corpus`, when present.
pub fn image_path(corpus: &CaptionCorpus, image_id: u64) -> Option<PathBuf> {
    corpus
        .records
        .iter()
        .find(|r| r.image_id == image_id)
        .map(|r| r.image_path.clone())
}
