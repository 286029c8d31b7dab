// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus-level 4-gram BLEU over token ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Precision used in place of a zero n-gram precision.
pub const PRECISION_FLOOR: f64 = 0.01;
const MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    /// Modified precisions for n = 1..4, before flooring.
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(s: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn corpus_bleu<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_N {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_N];
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        precisions[n] = if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        let p = if matches[n] == 0 {
            PRECISION_FLOOR
        } else {
            precisions[n]
        };
        log_sum += p.ln();
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let bleu = if c == 0 {
        0.0
    } else {
        100.0 * bp * (log_sum / MAX_N as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        let b = corpus_bleu(&refs, &refs).unwrap();
        assert!((b.bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn short_hypothesis_pays_brevity_penalty() {
        let b = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]]).unwrap();
        // exp(1 - 5/4) * 100
        assert!((b.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b.bleu - 77.880).abs() < 0.01);
    }

    #[test]
    fn disjoint_tokens_score_at_the_floor() {
        let b = corpus_bleu(&[vec![1, 2, 3, 4, 5]], &[vec![6, 7, 8, 9, 10]]).unwrap();
        // every precision sits on the floor, so BLEU = 100 * floor
        let expect = 100.0 * PRECISION_FLOOR;
        assert!((b.bleu - expect).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(corpus_bleu(&[vec![1]], &[vec![1], vec![2]]).is_err());
        let empty: Vec<Vec<TokenId>> = vec![];
        assert!(corpus_bleu(&empty, &empty).is_err());
    }

    #[test]
    fn order_invariant() {
        let h = vec![vec![1, 2, 3, 9], vec![4, 5, 6, 7, 8], vec![2, 2]];
        let r = vec![vec![1, 2, 3, 4], vec![4, 5, 6, 7], vec![2, 3, 2]];
        let a = corpus_bleu(&h, &r).unwrap();
        let hr: Vec<_> = h.iter().rev().cloned().collect();
        let rr: Vec<_> = r.iter().rev().cloned().collect();
        let b = corpus_bleu(&hr, &rr).unwrap();
        assert_eq!(a.bleu, b.bleu);
    }
}
