//! Caption objective, learning-rate schedule, optimiser and the training loop.

mod gradcheck;
mod optim;
mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck, gradcheck_variant, tiny_model, GradcheckEntry, GradcheckReport, GRADCHECK_STEP};
pub use optim::AdamW;
pub use schedule::{lr_at_step, LrSchedule};

use crate::autograd::{Gradients, Graph, Var};
use crate::backbones::LanguageModel;
use crate::error::{Error, Result};
use crate::model::{EncodedSample, TpCap};
use crate::params::ParamStore;
use crate::pipeline::AssembledPrompt;
use crate::purification::EntityInfo;
use crate::tensor::Matrix;
use crate::tokenizer::EOS;

/// Target slots for a prompt of `prompt_len` rows followed by the gold
/// caption minus its last token. Row `prompt_len - 1 + i` predicts `c_i`.
pub fn caption_targets(prompt_len: usize, caption_ids: &[u32]) -> Vec<Option<usize>> {
    let mut t = vec![None; prompt_len + caption_ids.len().saturating_sub(1)];
    for (i, &c) in caption_ids.iter().enumerate() {
        t[prompt_len - 1 + i] = Some(c as usize);
    }
    t
}

fn check_caption(prompt_len: usize, caption_ids: &[u32]) -> Result<()> {
    if prompt_len == 0 {
        return Err(Error::Input("caption loss needs a non-empty prompt".into()));
    }
    if caption_ids.last() != Some(&EOS) {
        return Err(Error::Input("caption must end with <eos>".into()));
    }
    Ok(())
}

/// Summed NLL of `caption_ids` under teacher forcing, given the embedded
/// prompt as a graph node.
pub fn caption_loss_graph(g: &mut Graph, lm: &LanguageModel, prompt: Var, caption_ids: &[u32]) -> Result<Var> {
    let n = g.value(prompt).rows();
    check_caption(n, caption_ids)?;
    let total = n + caption_ids.len() - 1;
    if total > lm.max_positions() {
        return Err(Error::Input(format!(
            "prompt plus caption is {total} positions, context is {}",
            lm.max_positions()
        )));
    }
    let input = if caption_ids.len() > 1 {
        let gold = lm.embed(g, &caption_ids[..caption_ids.len() - 1])?;
        g.concat_rows(&[prompt, gold])
    } else {
        prompt
    };
    let logits = lm.forward(g, input)?;
    Ok(g.cross_entropy(logits, &caption_targets(n, caption_ids)))
}

/// Caption loss of an assembled prompt; `max_len` bounds the caption
/// including its `<eos>`.
pub fn caption_loss(
    store: &ParamStore,
    lm: &LanguageModel,
    prompt: &AssembledPrompt,
    caption_ids: &[u32],
    max_len: usize,
) -> Result<f64> {
    if caption_ids.len() > max_len {
        return Err(Error::Input(format!(
            "caption has {} tokens, limit {max_len}",
            caption_ids.len()
        )));
    }
    let mut g = Graph::inference(store);
    let p = g.constant(prompt.embeddings.clone());
    let loss = caption_loss_graph(&mut g, lm, p, caption_ids)?;
    Ok(g.value(loss).get(0, 0))
}

/// The same reduction applied to precomputed logits (one row per input position).
pub fn sequence_nll(logits: &Matrix, prompt_len: usize, caption_ids: &[u32]) -> Result<f64> {
    check_caption(prompt_len, caption_ids)?;
    let targets = caption_targets(prompt_len, caption_ids);
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "expected {} logit rows, got {}",
            targets.len(),
            logits.rows()
        )));
    }
    if targets.iter().flatten().any(|&t| t >= logits.cols()) {
        return Err(Error::Index("caption id outside the logit vocabulary".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, &targets);
    Ok(g.value(loss).get(0, 0))
}

/// One optimiser step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean over the batch of per-sample summed NLL.
    pub loss: f64,
    pub lr: f64,
    #[serde(skip)]
    pub sample_losses: Vec<f64>,
}

impl LossRecord {
    /// `{step, loss, lr}` on one line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialise")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

impl TrainReport {
    /// Mean loss over the first and last `fraction` of steps (at least one step each).
    pub fn head_tail_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.records.len();
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
        let mean = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        (mean(&self.records[..k]), mean(&self.records[n - k..]))
    }

    pub fn metrics(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("train_steps".into(), self.records.len().into());
        if !self.records.is_empty() {
            let (head, tail) = self.head_tail_means(0.1);
            m.insert("loss_first_10pct".into(), head.into());
            m.insert("loss_last_10pct".into(), tail.into());
        }
        m
    }
}

/// Optimisation steps for `n` samples under `model`'s training configuration.
pub fn total_steps(model: &TpCap, n: usize) -> usize {
    let cfg = &model.config.train;
    cfg.epochs * n.div_ceil(cfg.batch_size)
}

/// Trains the trainable parameters of `model` on `data` for the configured
/// number of epochs. `on_step` sees every record as it is produced.
///
/// Entity text is regenerated for every sample at every step with the current
/// weights; decoding is not differentiated.
pub fn train(
    model: &mut TpCap,
    data: &[EncodedSample],
    mut on_step: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let cfg = model.config.train.clone();
    cfg.validate()?;
    let targets: Vec<Vec<u32>> = data.iter().map(|s| model.target_ids(s)).collect::<Result<_>>()?;
    let total = total_steps(model, data.len());
    let schedule = cfg.schedule(total);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(4);
    let before = model.store.frozen_checksum();
    let mut records = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = records.len();
            let lr = schedule.lr_at_step(step)?;
            let (grads, sample_losses) = batch_gradients(model, data, &targets, batch)?;
            let loss = sample_losses.iter().sum::<f64>() / sample_losses.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss is not finite at step {step}")));
            }
            opt.step(&mut model.store, &grads, lr, |name| !name.contains("query"))?;
            let record = LossRecord {
                step,
                loss,
                lr,
                sample_losses,
            };
            on_step(&record)?;
            records.push(record);
        }
    }
    let after = model.store.frozen_checksum();
    if after != before {
        return Err(Error::Training("a frozen parameter changed during training".into()));
    }
    Ok(TrainReport {
        records,
        frozen_checksum_before: before,
        frozen_checksum_after: after,
    })
}

/// Batch-mean gradient and per-sample losses.
fn batch_gradients(
    model: &TpCap,
    data: &[EncodedSample],
    targets: &[Vec<u32>],
    batch: &[usize],
) -> Result<(Gradients, Vec<f64>)> {
    let mut grads = Gradients::default();
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let info: EntityInfo = model.entity_info_for(&data[i].patches)?;
        let mut g = Graph::new(&model.store);
        let loss = model.caption_loss_graph(&mut g, &data[i].patches, &info, &targets[i])?;
        losses.push(g.value(loss).get(0, 0));
        grads.accumulate(&g.backward(loss));
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((grads, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn targets_start_at_last_prompt_row() {
        assert_eq!(
            caption_targets(3, &[7, 8, EOS]),
            vec![None, None, Some(7), Some(8), Some(EOS as usize)]
        );
    }

    #[test]
    fn uniform_logits_cost_l_ln_v() {
        let v = 11;
        let caption = [5, 6, 7, EOS];
        let logits = Matrix::zeros(4 + caption.len() - 1, v);
        let nll = sequence_nll(&logits, 4, &caption).unwrap();
        assert!((nll - 4.0 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_logits_cost_nothing() {
        let caption = [5, 6, EOS];
        let mut logits = Matrix::zeros(2 + 2, 8);
        for (i, &c) in caption.iter().enumerate() {
            logits.set(1 + i, c as usize, 1e4);
        }
        assert_eq!(sequence_nll(&logits, 2, &caption).unwrap(), 0.0);
    }

    #[test]
    fn caption_without_eos_is_rejected() {
        let logits = Matrix::zeros(3, 8);
        assert!(matches!(sequence_nll(&logits, 2, &[5, 6]), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn prompt_rows_do_not_affect_loss(
            seed in 0u64..500,
            prompt_len in 1usize..6,
            noise in proptest::collection::vec(-5.0f64..5.0, 6 * 9),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let caption = [5u32, 7, EOS];
            let logits = Matrix::randn(prompt_len + 2, 9, 1.0, &mut rng);
            let base = sequence_nll(&logits, prompt_len, &caption).unwrap();
            let mut altered = logits.clone();
            for r in 0..prompt_len - 1 {
                for c in 0..9 {
                    altered.set(r, c, noise[r * 9 + c]);
                }
            }
            prop_assert_eq!(sequence_nll(&altered, prompt_len, &caption).unwrap(), base);
        }
    }
}
