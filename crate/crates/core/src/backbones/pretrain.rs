//! Teaches the toy language model to answer both prompt formats from visual
//! features before everything is frozen.
//!
//! The feature slot of every example is filled through the real visual path:
//! compressor, a pretraining-only adapter, then the seeded frozen bridge
//! layer. The language model, the image query tokens and the adapter are
//! trained; the bridge never is. A captioner later learns its own trigger
//! layer into the same bridge.
//!
//! Caption-prompt examples may carry an entity block after the visual
//! block. It is computed the way the `mp` captioner computes it: entity
//! queries attend over themselves and the visual features, then over the
//! embedded entity words, and the result goes through the adapter and the
//! bridge. Those attentions, the queries and the null-entity row are
//! trained here along with the language model and then frozen, so the
//! captioner starts from an entity path the language model can read. The
//! entity words are sometimes corrupted, dropped or swapped for another
//! scene's list, as a generated entity list can be partly wrong, empty or
//! fluent but about a different image; the entity path has to learn to
//! check them against the visual features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, EncodedSample};
use crate::autograd::{Gradients, Graph};
use crate::config::{warmup_steps, PretrainConfig};
use crate::error::{Error, Result};
use crate::pipeline::PromptTemplate;
use crate::purification::EntityInfo;
use crate::tokenizer::{normalize, Tokenizer, EOS};
use crate::training::{caption_loss_graph, AdamW, LrSchedule};

const HELDOUT_EXAMPLES: usize = 64;

/// One pretraining sequence: `prefix, visual rows, entity block, suffix, answer`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub caption_prompt: bool,
    pub prefix: Vec<u32>,
    /// Entity words behind the entity block, if there is one. An empty list
    /// gives the null-entity row.
    pub entity_text: Option<Vec<u32>>,
    pub suffix: Vec<u32>,
    /// Answer tokens, ending in `<eos>`.
    pub answer: Vec<u32>,
}

/// Builds pretraining examples from encoded samples.
#[derive(Debug, Clone)]
pub struct ExampleSampler {
    lp1: (Vec<u32>, Vec<u32>),
    lp2: (Vec<u32>, Vec<u32>),
    entity_prob: f64,
    noise: f64,
    /// Replacement words for corrupted entity lists.
    entity_vocab: Vec<u32>,
    /// Entity lists of the sampled scenes, for swapping in a wrong one.
    scene_lists: Vec<Vec<u32>>,
}

impl ExampleSampler {
    /// `entity_prob` is the chance a caption-prompt example gets an entity
    /// block. `noise` is the per-word substitution rate, the chance the entity
    /// list is dropped and the chance it is swapped for another scene's.
    pub fn new(tokenizer: &Tokenizer, samples: &[EncodedSample], entity_prob: f64, noise: f64) -> Self {
        let scene_lists: Vec<Vec<u32>> = samples
            .iter()
            .map(|s| Self::entity_words(tokenizer, &s.entities))
            .filter(|w| !w.is_empty())
            .collect();
        let mut entity_vocab: Vec<u32> = scene_lists.iter().flatten().copied().collect();
        entity_vocab.sort_unstable();
        entity_vocab.dedup();
        Self {
            lp1: PromptTemplate::lp1().token_ids(tokenizer),
            lp2: PromptTemplate::lp2().token_ids(tokenizer),
            entity_prob,
            noise,
            entity_vocab,
            scene_lists,
        }
    }

    fn noisy(&self, words: &[u32], rng: &mut (impl Rng + ?Sized)) -> Vec<u32> {
        let r: f64 = rng.gen();
        if words.is_empty() || r < self.noise {
            return Vec::new();
        }
        if r < 2.0 * self.noise {
            if let Some(other) = self.scene_lists.choose(rng) {
                return other.clone();
            }
        }
        words
            .iter()
            .map(|&w| match self.entity_vocab.choose(rng) {
                Some(&r) if rng.gen_bool(self.noise) => r,
                _ => w,
            })
            .collect()
    }

    /// Entity-prompt answers list the entity words in scene order.
    pub fn entity_words(tokenizer: &Tokenizer, entities: &[String]) -> Vec<u32> {
        entities
            .iter()
            .flat_map(|e| normalize(e))
            .flat_map(|w| tokenizer.encode(&w))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        tokenizer: &Tokenizer,
        sample: &EncodedSample,
        rng: &mut R,
    ) -> Result<PretrainExample> {
        let words = Self::entity_words(tokenizer, &sample.entities);
        let caption_prompt = words.is_empty() || rng.gen_bool(0.5);
        let mut ex = if caption_prompt {
            let entity_text = rng.gen_bool(self.entity_prob).then(|| self.noisy(&words, rng));
            let reference = sample
                .references
                .first()
                .ok_or_else(|| Error::Input(format!("image {} has no reference", sample.image_id)))?;
            PretrainExample {
                caption_prompt,
                prefix: self.lp2.0.clone(),
                entity_text,
                suffix: self.lp2.1.clone(),
                answer: tokenizer.encode_tokens(reference),
            }
        } else {
            PretrainExample {
                caption_prompt,
                prefix: self.lp1.0.clone(),
                entity_text: None,
                suffix: self.lp1.1.clone(),
                answer: words,
            }
        };
        ex.answer.push(EOS);
        Ok(ex)
    }
}

/// Summary written into the backbone manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean answer-token loss per step.
    pub losses: Vec<f64>,
    pub heldout_loss: f64,
}

impl PretrainReport {
    pub fn metrics(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("pretrain_steps".into(), self.steps.into());
        m.insert("pretrain_first_loss".into(), self.losses.first().copied().unwrap_or(f64::NAN).into());
        m.insert("pretrain_final_loss".into(), self.losses.last().copied().unwrap_or(f64::NAN).into());
        m.insert("heldout_loss".into(), self.heldout_loss.into());
        m
    }
}

/// Summed answer-token NLL of one example, and its gradients when `train`.
fn example_loss(
    backbone: &Backbone,
    sample: &EncodedSample,
    ex: &PretrainExample,
    train: bool,
) -> Result<(f64, Option<Gradients>)> {
    let m = &backbone.modules;
    let mut g = if train {
        Graph::new(&backbone.store)
    } else {
        Graph::inference(&backbone.store)
    };
    let prefix = m.lm.embed(&mut g, &ex.prefix)?;
    let patches = g.constant(sample.patches.0.clone());
    let fv = m.compressor.forward(&mut g, patches)?;
    let visual = m.to_lm_space(&mut g, fv);
    let mut parts = vec![prefix, visual];
    if let Some(words) = &ex.entity_text {
        let entity = m.entity_encoder.forward(&mut g, &m.lm, &EntityInfo(words.clone()))?;
        let queries = g.param(m.entity_queries);
        let fe = m.mp.forward(&mut g, queries, fv, entity);
        parts.push(m.to_lm_space(&mut g, fe));
    }
    parts.push(m.lm.embed(&mut g, &ex.suffix)?);
    let prompt = g.concat_rows(&parts);
    let loss = caption_loss_graph(&mut g, &m.lm, prompt, &ex.answer)?;
    let value = g.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::Training("pretraining loss is not finite".into()));
    }
    Ok((value, train.then(|| g.backward(loss))))
}

fn is_pretrained(name: &str) -> bool {
    name.starts_with("lm.")
        || name.starts_with("pretrain.")
        || name.starts_with("purifier.mp.")
        || name == "purifier.null_entity"
        || name == "compressor.image_query_tokens"
}

/// Trains the language model, image query tokens, adapter and entity path
/// of `backbone` in place, then restores the frozen set (only the query tokens trainable).
///
/// Fails with a training error when a loss becomes non-finite or when the
/// held-out loss does not reach `cfg.heldout_threshold`.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    train: &[EncodedSample],
    heldout: &[EncodedSample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let heldout = if heldout.is_empty() { train } else { heldout };
    let sampler = ExampleSampler::new(&backbone.tokenizer, train, cfg.entity_block_prob, cfg.entity_noise);

    let defaults: Vec<_> = backbone.store.iter().map(|(id, p)| (id, p.trainable())).collect();
    let ids: Vec<_> = backbone
        .store
        .iter()
        .filter(|(_, p)| is_pretrained(p.name()))
        .map(|(id, _)| id)
        .collect();
    backbone.store.freeze_all();
    for id in ids {
        backbone.store.set_trainable(id, true);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let schedule = LrSchedule::new(
        cfg.init_lr,
        cfg.min_lr,
        warmup_steps(cfg.warmup_fraction, cfg.steps),
        cfg.steps,
    );
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    let result = (|| {
        for step in 0..cfg.steps {
            let mut grads = Gradients::default();
            let (mut total, mut tokens) = (0.0, 0usize);
            for _ in 0..cfg.batch_size {
                let sample = train.choose(&mut rng).expect("nonempty");
                let ex = sampler.sample(&backbone.tokenizer, sample, &mut rng)?;
                let (loss, g) = example_loss(backbone, sample, &ex, true)?;
                total += loss;
                tokens += ex.answer.len();
                grads.accumulate(&g.expect("training pass"));
            }
            grads.scale(1.0 / tokens as f64);
            losses.push(total / tokens as f64);
            let lr = schedule.lr_at_step(step)?;
            opt.step(&mut backbone.store, &grads, lr, |_| false)?;
        }
        heldout_loss(backbone, &sampler, heldout, seed)
    })();
    backbone.store.freeze_all();
    for (id, trainable) in defaults {
        backbone.store.set_trainable(id, trainable);
    }
    let heldout_loss = result?;
    if !(heldout_loss < cfg.heldout_threshold) {
        return Err(Error::Training(format!(
            "held-out loss {heldout_loss:.4} not below threshold {}",
            cfg.heldout_threshold
        )));
    }
    Ok(PretrainReport {
        steps: cfg.steps,
        losses,
        heldout_loss,
    })
}

/// Mean answer-token loss over a fixed, seed-determined set of held-out examples.
fn heldout_loss(
    backbone: &Backbone,
    sampler: &ExampleSampler,
    heldout: &[EncodedSample],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let (mut total, mut tokens) = (0.0, 0usize);
    for i in 0..HELDOUT_EXAMPLES {
        let sample = &heldout[i % heldout.len()];
        let ex = sampler.sample(&backbone.tokenizer, sample, &mut rng)?;
        total += example_loss(backbone, sample, &ex, false)?.0;
        tokens += ex.answer.len();
    }
    Ok(total / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::PatchFeatures;
    use crate::config::{ModelConfig, RunConfig};
    use crate::pipeline::prompt_words;
    use crate::tensor::Matrix;

    fn sample(caption: &str, entities: &[&str], seed: u64) -> EncodedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::toy();
        EncodedSample {
            image_id: seed,
            patches: PatchFeatures(Matrix::randn(cfg.n_patches(), cfg.d_enc, 1.0, &mut rng)),
            references: vec![normalize(caption)],
            entities: entities.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn tokenizer(texts: &[&str]) -> Tokenizer {
        Tokenizer::from_texts(prompt_words().into_iter().chain(texts.iter().copied()))
    }

    #[test]
    fn examples_follow_the_two_prompt_formats() {
        let s = sample("a red circle and a blue square", &["red circle", "blue square"], 1);
        let tok = tokenizer(&["a red circle and a blue square"]);
        let sampler = ExampleSampler::new(&tok, std::slice::from_ref(&s), 0.5, 0.2);
        let vocab = tok.encode("red circle blue square");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut lp1, mut plain, mut faithful, mut altered, mut dropped) = (0, 0, 0, 0, 0);
        for _ in 0..200 {
            let ex = sampler.sample(&tok, &s, &mut rng).unwrap();
            assert_eq!(*ex.answer.last().unwrap(), EOS);
            if ex.caption_prompt {
                assert_eq!(ex.answer, [tok.encode("a red circle and a blue square"), vec![EOS]].concat());
                match &ex.entity_text {
                    None => plain += 1,
                    Some(w) if w.is_empty() => dropped += 1,
                    Some(w) if *w == vocab => faithful += 1,
                    Some(w) => {
                        altered += 1;
                        assert!(w.iter().all(|t| vocab.contains(t)));
                    }
                }
            } else {
                lp1 += 1;
                assert_eq!(ex.answer, [tok.encode("red circle blue square"), vec![EOS]].concat());
                assert!(ex.entity_text.is_none());
            }
        }
        assert!(lp1 > 0 && plain > 0 && faithful > 0 && altered > 0 && dropped > 0);
    }

    #[test]
    fn scene_without_entities_always_gets_the_caption_prompt() {
        let s = sample("nothing here", &[], 2);
        let tok = tokenizer(&["nothing here"]);
        let sampler = ExampleSampler::new(&tok, std::slice::from_ref(&s), 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let ex = sampler.sample(&tok, &s, &mut rng).unwrap();
            assert!(ex.caption_prompt);
            assert_eq!(ex.entity_text, Some(Vec::new()));
        }
    }

    #[test]
    fn step_zero_loss_is_log_vocab_and_one_sentence_is_memorised() {
        let s = vec![sample("a red circle", &["red circle"], 3)];
        let tok = tokenizer(&["a red circle"]);
        let v = tok.vocab_size() as f64;
        let mut b = Backbone::init(&RunConfig::default(), tok).unwrap();
        let cfg = PretrainConfig {
            steps: 150,
            batch_size: 2,
            init_lr: 1e-2,
            min_lr: 1e-3,
            heldout_threshold: 0.1,
            ..PretrainConfig::default()
        };
        let bridge = b.store.checksum_where(|p| p.name().starts_with("projector.frozen"));
        let before = b.store.frozen_checksum();
        let report = pretrain_backbone(&mut b, &s, &s, &cfg, 0).unwrap();
        assert!((report.losses[0] - v.ln()).abs() < 1e-9, "{}", report.losses[0]);
        assert!(*report.losses.last().unwrap() < 0.1);
        assert!(report.heldout_loss < 0.1);
        // the language model is frozen again afterwards and has changed; the bridge has not
        assert_ne!(b.store.frozen_checksum(), before);
        assert_eq!(b.store.checksum_where(|p| p.name().starts_with("projector.frozen")), bridge);
        assert_eq!(b.store.trainable_ids(), vec![b.modules.compressor.queries]);
    }
}
