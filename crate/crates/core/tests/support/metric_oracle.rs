//! Brute-force forms of BLEU, ROUGE-L and CIDEr-D.
//!
//! They favour obviousness over speed: n-grams are joined strings in a
//! linear list, LCS is found by trying every subsequence of the candidate.

type Tokens = Vec<String>;

fn grams(t: &[String], n: usize) -> Vec<String> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].join(" ")).collect()
}

fn count(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| *x == g).count()
}

fn unique(list: &[String]) -> Vec<String> {
    let mut u: Vec<String> = Vec::new();
    for g in list {
        if !u.contains(g) {
            u.push(g.clone());
        }
    }
    u
}

pub fn bleu_oracle(cands: &[Tokens], refs: &[Vec<Tokens>], max_n: usize) -> Vec<f64> {
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0usize;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (cand, rs) in cands.iter().zip(refs) {
            let cg = grams(cand, n);
            tot += cg.len();
            for g in unique(&cg) {
                let max_ref = rs.iter().map(|x| count(&grams(x, n), &g)).max().unwrap();
                hit += count(&cg, &g).min(max_ref);
            }
        }
        precisions.push(if tot == 0 { 0.0 } else { hit as f64 / tot as f64 });
    }
    (1..=max_n)
        .map(|n| {
            let p = &precisions[..n];
            if p.iter().any(|&x| x == 0.0) {
                0.0
            } else {
                bp * p.iter().product::<f64>().powf(1.0 / n as f64)
            }
        })
        .collect()
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn rouge_oracle(cands: &[Tokens], refs: &[Vec<Tokens>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let per: Vec<f64> = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            rs.iter()
                .map(|r| {
                    let l = lcs_oracle(c, r) as f64;
                    if l == 0.0 {
                        return 0.0;
                    }
                    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
                    (1.0 + beta2) * p * rc / (rc + beta2 * p)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// `(gram, weight)` pairs for one sentence and order.
fn tfidf(t: &[String], n: usize, refs: &[Vec<Tokens>]) -> Vec<(String, f64)> {
    let g = grams(t, n);
    let n_images = refs.len() as f64;
    unique(&g)
        .into_iter()
        .map(|gram| {
            let df = refs
                .iter()
                .filter(|rs| rs.iter().any(|r| grams(r, n).contains(&gram)))
                .count()
                .max(1) as f64;
            let w = count(&g, &gram) as f64 * (n_images.ln() - df.ln());
            (gram, w)
        })
        .collect()
}

pub fn cider_oracle(cands: &[Tokens], refs: &[Vec<Tokens>]) -> f64 {
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut image = 0.0;
        for r in rs {
            let delta = c.len() as f64 - r.len() as f64;
            let penalty = (-delta * delta / 72.0).exp();
            for n in 1..=4 {
                let hv = tfidf(c, n, refs);
                let rv = tfidf(r, n, refs);
                let norm = |v: &[(String, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                let (hn, rn) = (norm(&hv), norm(&rv));
                if hn == 0.0 || rn == 0.0 {
                    continue;
                }
                let dot: f64 = hv
                    .iter()
                    .filter_map(|(g, h)| rv.iter().find(|(x, _)| x == g).map(|(_, r)| h.min(*r) * r))
                    .sum();
                image += dot / (hn * rn) * penalty / 4.0;
            }
        }
        total += 10.0 * image / rs.len() as f64;
    }
    total / cands.len() as f64
}
