use super::{check_corpus, ngram_counts, Tokens};
use crate::error::{Error, Result};

/// Corpus BLEU@1..=`max_n` without smoothing.
///
/// Modified n-gram precision clips each candidate n-gram count by its maximum
/// count in any single reference. The brevity penalty uses, per candidate, the
/// reference length closest to the candidate length (ties go to the shorter).
pub fn bleu(candidates: &[Tokens], references: &[Vec<Tokens>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    if max_n == 0 {
        return Err(Error::Input("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("references checked nonempty");
        for n in 1..=max_n {
            let counts = ngram_counts(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &c) in &counts {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += c.min(max_ref);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }

    let brevity = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        if matched[n - 1] == 0 || total[n - 1] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n - 1] as f64 / total[n - 1] as f64).ln();
        }
        scores.push(if zero {
            0.0
        } else {
            brevity * (log_sum / n as f64).exp()
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn exact_match_scores_one() {
        let c = vec![toks("a red circle and a blue square"), toks("a green triangle")];
        let r = vec![vec![toks("x y"), c[0].clone()], vec![c[1].clone()]];
        for s in bleu(&c, &r, 4).unwrap() {
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn no_shared_four_gram_zeroes_bleu4() {
        let c = vec![toks("a red circle and square")];
        let r = vec![vec![toks("a red circle or a square")]];
        let s = bleu(&c, &r, 4).unwrap();
        assert!(s[0] > 0.0 && s[2] > 0.0);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn clipping_and_brevity() {
        // candidate "the the the" vs reference "the cat": p1 = 1/3, c=3 > r=2 so no penalty
        let s = bleu(&[toks("the the the")], &[vec![toks("the cat")]], 1).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15);
        // short candidate: c=1, r=2, BP = e^{1-2}
        let s = bleu(&[toks("cat")], &[vec![toks("the cat")]], 1).unwrap();
        assert!((s[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        assert!(bleu(&[], &[], 4).is_err());
    }
}
