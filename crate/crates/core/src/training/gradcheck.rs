//! Central finite-difference check of caption-loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::backbones::{Backbone, PatchFeatures};
use crate::config::{ModelConfig, RunConfig, VariantConfig};
use crate::error::Result;
use crate::model::TpCap;
use crate::pipeline::prompt_words;
use crate::purification::EntityInfo;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, EOS};

pub const GRADCHECK_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub variant: String,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Parameters whose error reaches `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&GradcheckEntry> {
        self.entries.iter().filter(|e| !(e.max_rel_error < tol)).collect()
    }
}

/// A tiny-dims model with a random language-model head, so every trainable
/// parameter receives a nonzero gradient.
pub fn tiny_model(variant: VariantConfig, seed: u64) -> Result<TpCap> {
    let words = "a red blue green circle square triangle and on the left right";
    let tok = Tokenizer::from_texts(prompt_words().into_iter().chain([words]));
    let cfg = RunConfig {
        seed,
        model: ModelConfig::tiny(),
        variant,
        ..RunConfig::default()
    };
    let backbone = Backbone::init(&cfg, tok)?;
    let mut model = TpCap::from_backbone(backbone, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let head = *model.backbone.lm.head();
    for id in [head.weight, head.bias] {
        let (r, c) = model.store.value(id).shape();
        model.store.set_value(id, Matrix::randn(r, c, 0.5, &mut rng))?;
    }
    Ok(model)
}

/// Compares the analytic gradient of one sample's caption loss against
/// central differences for every element of every trainable parameter.
/// `info` is held fixed, as during training.
pub fn gradcheck(
    model: &mut TpCap,
    patches: &PatchFeatures,
    info: &EntityInfo,
    caption_ids: &[u32],
) -> Result<GradcheckReport> {
    let analytic = {
        let mut g = Graph::new(&model.store);
        let loss = model.caption_loss_graph(&mut g, patches, info, caption_ids)?;
        g.backward(loss)
    };
    let loss_at = |m: &TpCap| -> Result<f64> {
        let mut g = Graph::inference(&m.store);
        let loss = m.caption_loss_graph(&mut g, patches, info, caption_ids)?;
        Ok(g.value(loss).get(0, 0))
    };
    let mut entries = Vec::new();
    for id in model.store.trainable_ids() {
        let name = model.store.param(id).name().to_string();
        let numel = model.store.param(id).numel();
        let zero = Matrix::zeros(model.store.value(id).rows(), model.store.value(id).cols());
        let grad = analytic.get(id).unwrap_or(&zero).clone();
        let mut worst = 0.0f64;
        for k in 0..numel {
            let orig = model.store.value(id).data()[k];
            model.store.value_mut_unrounded(id).data_mut()[k] = orig + GRADCHECK_STEP;
            let up = loss_at(model)?;
            model.store.value_mut_unrounded(id).data_mut()[k] = orig - GRADCHECK_STEP;
            let down = loss_at(model)?;
            model.store.value_mut_unrounded(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        entries.push(GradcheckEntry {
            name,
            numel,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        variant: format!(
            "{} {} ta1={}",
            model.config.variant.projector.label(),
            model.config.variant.purification,
            model.config.variant.ta1
        ),
        entries,
    })
}

/// Random patches, entity text and caption for a tiny model, then [`gradcheck`].
pub fn gradcheck_variant(variant: VariantConfig, seed: u64) -> Result<GradcheckReport> {
    let mut model = tiny_model(variant, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let cfg = model.config.model.clone();
    let patches = PatchFeatures(Matrix::randn(cfg.n_patches(), cfg.d_enc, 1.0, &mut rng));
    let v = model.tokenizer.vocab_size() as u32;
    let mut word = || rng.gen_range(5..v);
    let info = if variant.ta1 {
        EntityInfo(vec![word(), word(), word()])
    } else {
        EntityInfo::default()
    };
    let caption = vec![word(), word(), word(), EOS];
    gradcheck(&mut model, &patches, &info, &caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ProjectorPair, Purification};

    #[test]
    fn frozen_second_layer_is_not_reported() {
        let r = gradcheck_variant(VariantConfig::default(), 3).unwrap();
        let names: Vec<_> = r.entries.iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"projector.shared.trigger.weight"));
        assert!(names.contains(&"purifier.entity_query_tokens"));
        assert!(names.iter().all(|n| !n.contains("frozen")));
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn fusion_attentions_are_checked() {
        let v = VariantConfig {
            projector: "dl".parse::<ProjectorPair>().unwrap(),
            purification: Purification::Fusion,
            ta1: true,
        };
        let r = gradcheck_variant(v, 5).unwrap();
        assert!(r.entries.iter().any(|e| e.name.starts_with("purifier.fusion")));
        assert!(r.failures(1e-4).is_empty(), "{r:?}");
    }
}
