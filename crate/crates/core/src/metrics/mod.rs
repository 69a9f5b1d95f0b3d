//! Corpus-level caption metrics: BLEU@1–4, ROUGE-L and CIDEr-D.
//!
//! Candidates and references are pre-tokenised word sequences. Per-image
//! scores are summed in sorted order so corpus scores do not depend on
//! record order, not even in the last bit.

mod bleu;
mod cider;
mod rouge;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::bleu;
pub use cider::{cider_d, CIDER_SIGMA};
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};

pub type Tokens = Vec<String>;

/// Counts of every n-gram of order `n` in `tokens`.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub(crate) fn check_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Input("metric over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("image {i} has no references")));
    }
    Ok(())
}

/// Order-independent mean.
pub(crate) fn sorted_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / n
}

/// All scores for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
}

pub fn score_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<CorpusScores> {
    Ok(CorpusScores {
        bleu: bleu(candidates, references, 4)?
            .try_into()
            .expect("four BLEU orders"),
        rouge_l: rouge_l(candidates, references)?,
        cider_d: cider_d(candidates, references)?,
    })
}
