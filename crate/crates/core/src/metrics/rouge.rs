use super::{check_corpus, sorted_mean, Tokens};
use crate::error::Result;

/// Recall weight of the LCS F-measure (the COCO evaluation value).
pub const ROUGE_BETA: f64 = 1.2;

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_measure(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over images of the best per-reference LCS F-measure.
pub fn rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let per_image = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| f_measure(c, r)).fold(0.0, f64::max))
        .collect();
    Ok(sorted_mean(per_image))
}
