use std::collections::{BTreeMap, BTreeSet};

use super::{check_corpus, ngram_counts, sorted_mean, Tokens};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

type Vector<'a> = BTreeMap<&'a [String], f64>;

struct TfIdf<'a> {
    grams: [Vector<'a>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

fn tf_idf<'a>(
    tokens: &'a [String],
    doc_freq: &BTreeMap<&'a [String], usize>,
    log_n: f64,
) -> TfIdf<'a> {
    let mut grams: [Vector<'a>; MAX_N] = Default::default();
    let mut norms = [0.0; MAX_N];
    for n in 1..=MAX_N {
        for (gram, tf) in ngram_counts(tokens, n) {
            let df = doc_freq.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - df.ln());
            norms[n - 1] += w * w;
            grams[n - 1].insert(gram, w);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    TfIdf {
        grams,
        norms,
        len: tokens.len(),
    }
}

fn similarity(hyp: &TfIdf, reference: &TfIdf) -> f64 {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        if hyp.norms[n] == 0.0 || reference.norms[n] == 0.0 {
            continue;
        }
        let mut dot = 0.0;
        for (gram, &h) in &hyp.grams[n] {
            if let Some(&r) = reference.grams[n].get(gram) {
                dot += h.min(r) * r;
            }
        }
        total += dot / (hyp.norms[n] * reference.norms[n]) * penalty;
    }
    total / MAX_N as f64
}

/// CIDEr-D: TF-IDF n-gram cosine (n = 1..=4) with clipped candidate weights
/// and a Gaussian length penalty, averaged over references and orders, × 10.
/// Document frequencies come from the reference sets.
pub fn cider_d(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::Input(
            "CIDEr-D needs at least two images for document frequencies".into(),
        ));
    }
    let mut doc_freq: BTreeMap<&[String], usize> = BTreeMap::new();
    for refs in references {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in refs {
            for n in 1..=MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *doc_freq.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (references.len() as f64).ln();
    let per_image = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let hyp = tf_idf(cand, &doc_freq, log_n);
            let sum: f64 = refs
                .iter()
                .map(|r| similarity(&hyp, &tf_idf(r, &doc_freq, log_n)))
                .sum();
            10.0 * sum / refs.len() as f64
        })
        .collect();
    Ok(sorted_mean(per_image))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_candidates_with_disjoint_images_score_ten() {
        let refs = vec![vec![toks("a red circle on top")], vec![toks("two blue squares here now")]];
        let cands: Vec<Tokens> = refs.iter().map(|r| r[0].clone()).collect();
        assert!((cider_d(&cands, &refs).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let refs = vec![vec![toks("a red circle")], vec![toks("a blue square")]];
        let cands = vec![toks("green triangle"), toks("yellow thing")];
        assert_eq!(cider_d(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn single_image_is_rejected() {
        assert!(cider_d(&[toks("a")], &[vec![toks("a")]]).is_err());
    }
}
