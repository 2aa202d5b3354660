//! Corpus-level BLEU with clipped n-gram counts and brevity penalty.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// `scores[n - 1]` is BLEU@n with uniform weights over orders `1..=n`.
    pub scores: Vec<f64>,
    /// Clipped modified precision of each order.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// BLEU@1..=`max_n` of tokenized `candidates` against their reference sets.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::validation("BLEU needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::validation(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::validation("BLEU order must be at least 1"));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::validation(format!("candidate {i} has no references")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if cand.is_empty() {
            log::warn!("candidate {i} is empty");
        }
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    if c_len == 0 {
        log::warn!("all candidates are empty; BLEU is 0");
    }
    let scores = (1..=max_n)
        .map(|n| {
            let p = &precisions[..n];
            if p.contains(&0.0) {
                0.0
            } else {
                brevity_penalty * (p.iter().map(|x| x.ln()).sum::<f64>() / n as f64).exp()
            }
        })
        .collect();
    Ok(BleuReport {
        scores,
        precisions,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identity_is_one() {
        let c = vec![t("a man is above a dog")];
        let r = vec![vec![t("a man is above a dog")]];
        let b = corpus_bleu(&c, &r, 4).unwrap();
        assert_eq!(b.scores, vec![1.0; 4]);
    }

    #[test]
    fn repeated_word_is_clipped() {
        let b = corpus_bleu(&[t("the the the")], &[vec![t("the cat")]], 1).unwrap();
        assert!((b.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn short_candidate_pays_brevity_penalty() {
        let b = corpus_bleu(&[t("a man is")], &[vec![t("a man is above a dog")]], 2).unwrap();
        let bp = (1.0f64 - 6.0 / 3.0).exp();
        assert!((b.brevity_penalty - bp).abs() < 1e-12);
        assert!((b.scores[1] - bp).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let b = corpus_bleu(&[vec![]], &[vec![t("a dog")]], 4).unwrap();
        assert_eq!(b.scores, vec![0.0; 4]);
    }

    #[test]
    fn reference_order_does_not_matter() {
        let c = vec![t("a man is beside a dog"), t("a woman is below a horse")];
        let r1 = vec![
            vec![t("a man is above a dog"), t("the man beside a dog")],
            vec![t("a woman is below the horse")],
        ];
        let mut r2 = r1.clone();
        r2[0].reverse();
        assert_eq!(corpus_bleu(&c, &r1, 4).unwrap(), corpus_bleu(&c, &r2, 4).unwrap());
    }
}
