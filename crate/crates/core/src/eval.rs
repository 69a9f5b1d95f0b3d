//! Corpus evaluation and the ablation grid.

use serde::{Deserialize, Serialize};

use crate::backbones::Backbone;
use crate::config::{ProjectorPair, Purification, RunConfig, VariantConfig, FORMAT_VERSION};
use crate::data::CaptionCorpus;
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, CorpusScores, Tokens};
use crate::model::{model_trainable_count, EncodedSample, TpCap};
use crate::pipeline::EntityDump;
use crate::tokenizer::normalize;
use crate::training::{train, TrainReport};

/// Scores of one checkpoint on one split. METEOR and SPICE are not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor: Option<f64>,
    pub spice: Option<f64>,
    pub n_images: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(scores: CorpusScores, n_images: usize, config: &RunConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            bleu: scores.bleu,
            rouge_l: scores.rouge_l,
            cider_d: scores.cider_d,
            meteor: None,
            spice: None,
            n_images,
            config_hash: config.hash(),
            seed: config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Entity text and caption per image, in corpus order.
    pub dumps: Vec<EntityDump>,
}

/// Captions every sample and scores the captions against its references.
pub fn evaluate_encoded(model: &TpCap, samples: &[EncodedSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let mut candidates: Vec<Tokens> = Vec::with_capacity(samples.len());
    let mut dumps = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.caption_patches(&s.patches)?;
        candidates.push(normalize(&out.caption));
        dumps.push(EntityDump {
            image_id: s.image_id,
            entity_info_text: out.entity_text,
            caption: out.caption,
        });
    }
    let references: Vec<Vec<Tokens>> = samples.iter().map(|s| s.references.clone()).collect();
    let scores = score_corpus(&candidates, &references)?;
    Ok(Evaluation {
        report: MetricReport::new(scores, samples.len(), &model.config),
        dumps,
    })
}

pub fn evaluate_corpus(model: &TpCap, corpus: &CaptionCorpus) -> Result<Evaluation> {
    evaluate_encoded(model, &model.encode_corpus(corpus)?)
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationCell {
    pub name: String,
    pub variant: VariantConfig,
}

/// For each projector pair: the full model with each requested purification,
/// entity stage without purification, purification without the entity stage,
/// and the caption-stage-only baseline.
pub fn ablation_grid(purifications: &[Purification], projectors: &[ProjectorPair]) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &projector in projectors {
        let label = projector.label();
        let mut push = |name: String, purification, ta1| {
            let variant = VariantConfig {
                projector,
                purification,
                ta1,
            };
            if !cells.iter().any(|c: &AblationCell| c.variant == variant) {
                cells.push(AblationCell { name, variant });
            }
        };
        for &p in purifications.iter().filter(|p| **p != Purification::None) {
            push(format!("{label} full ({p})"), p, true);
        }
        push(format!("{label} ta1 only"), Purification::None, true);
        push(format!("{label} mp only"), Purification::Mp, false);
        push(format!("{label} baseline"), Purification::None, false);
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub projector: String,
    pub ta1: bool,
    pub purification: Purification,
    pub trainable_params: u64,
    pub final_loss: f64,
    pub report: MetricReport,
}

/// Trains and evaluates every cell from the same backbone, seed and data.
pub fn run_ablation(
    backbone: &Backbone,
    base: &RunConfig,
    train_set: &[EncodedSample],
    test_set: &[EncodedSample],
    cells: &[AblationCell],
    mut on_cell: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = RunConfig {
            variant: cell.variant,
            ..base.clone()
        };
        let mut model = TpCap::from_backbone(backbone.clone(), &cfg)?;
        let report: TrainReport = train(&mut model, train_set, |_| Ok(()))?;
        let eval = evaluate_encoded(&model, test_set)?;
        let row = AblationRow {
            name: cell.name.clone(),
            projector: cell.variant.projector.label(),
            ta1: cell.variant.ta1,
            purification: cell.variant.purification,
            trainable_params: model_trainable_count(&cfg.model, &cfg.variant),
            final_loss: report.records.last().map_or(f64::NAN, |r| r.loss),
            report: eval.report,
        };
        on_cell(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| cell | projector | TA1 | purification | trainable | BLEU-4 | ROUGE-L | CIDEr-D |\n\
         |---|---|---|---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
            r.name,
            r.projector,
            if r.ta1 { "+" } else { "-" },
            r.purification,
            r.trainable_params,
            r.report.bleu[3],
            r.report.rouge_l,
            r.report.cider_d
        ));
    }
    s
}
