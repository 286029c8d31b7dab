// SPDX-License-Identifier: MIT OR Apache-2.0

//! Translation error detectors and metrics.

mod bleu;
mod repetition;

use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, VocabLayout};
use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSeq};
pub use bleu::{corpus_bleu, BleuReport, PRECISION_FLOOR};
pub use repetition::{detect_repetition, suffix_period, RepetitionVerdict};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageVerdict {
    /// `None` on ties or when there are no content tokens.
    pub detected: Option<Lang>,
    /// Content tokens per language, indexed by [`Lang::index`].
    pub counts: [usize; 3],
    /// Special or out-of-layout tokens.
    pub other: usize,
}

/// Strict-majority language by content-token count.
pub fn detect_language(tokens: &[TokenId], layout: &VocabLayout) -> LanguageVerdict {
    let mut counts = [0; 3];
    let mut other = 0;
    for &t in tokens {
        match layout.language_of(t) {
            Some(l) => counts[l.index()] += 1,
            None => other += 1,
        }
    }
    let best = *counts.iter().max().unwrap();
    let winners: Vec<Lang> = Lang::ALL
        .into_iter()
        .filter(|l| counts[l.index()] == best)
        .collect();
    let detected = if best > 0 && winners.len() == 1 {
        Some(winners[0])
    } else {
        None
    };
    LanguageVerdict {
        detected,
        counts,
        other,
    }
}

/// One generation to be judged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub generation: TokenSeq,
    pub target_lang: Lang,
    pub hit_max: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub lmr: f64,
    pub rr: f64,
    pub n_cases: usize,
    pub mismatch: Vec<bool>,
    pub repeated: Vec<bool>,
}

/// Language-mismatch and repetition ratios over the full case count.
pub fn compute_error_metrics(cases: &[EvalCase], layout: &VocabLayout) -> Result<ErrorMetrics> {
    if cases.is_empty() {
        return Err(Error::Empty("case list"));
    }
    let mismatch: Vec<bool> = cases
        .iter()
        .map(|c| detect_language(&c.generation, layout).detected != Some(c.target_lang))
        .collect();
    let repeated: Vec<bool> = cases
        .iter()
        .map(|c| detect_repetition(&c.generation, c.hit_max).flagged)
        .collect();
    let n = cases.len() as f64;
    Ok(ErrorMetrics {
        lmr: mismatch.iter().filter(|&&b| b).count() as f64 / n,
        rr: repeated.iter().filter(|&&b| b).count() as f64 / n,
        n_cases: cases.len(),
        mismatch,
        repeated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub bleu: f64,
    pub count: usize,
}

/// BLEU on the whole set and on each error subset. Empty sets are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourWaySplitReport {
    pub origin: Option<SetScore>,
    pub language_mismatch: Option<SetScore>,
    pub repetition: Option<SetScore>,
    pub regular: Option<SetScore>,
}

fn subset_bleu(
    hyps: &[TokenSeq],
    refs: &[TokenSeq],
    keep: impl Fn(usize) -> bool,
) -> Option<SetScore> {
    let idx: Vec<usize> = (0..hyps.len()).filter(|&i| keep(i)).collect();
    if idx.is_empty() {
        return None;
    }
    let h: Vec<&[TokenId]> = idx.iter().map(|&i| &hyps[i][..]).collect();
    let r: Vec<&[TokenId]> = idx.iter().map(|&i| &refs[i][..]).collect();
    corpus_bleu(&h, &r).ok().map(|b| SetScore {
        bleu: b.bleu,
        count: idx.len(),
    })
}

/// Splits cases into Origin, LanguageMismatch, Repetition and Regular
/// (the cases with neither error) and scores each.
pub fn four_way_split(
    hypotheses: &[TokenSeq],
    references: &[TokenSeq],
    mismatch: &[bool],
    repeated: &[bool],
) -> Result<FourWaySplitReport> {
    let n = hypotheses.len();
    if references.len() != n || mismatch.len() != n || repeated.len() != n {
        return Err(Error::InvalidArgument(
            "four-way split inputs differ in length".into(),
        ));
    }
    Ok(FourWaySplitReport {
        origin: subset_bleu(hypotheses, references, |_| true),
        language_mismatch: subset_bleu(hypotheses, references, |i| mismatch[i]),
        repetition: subset_bleu(hypotheses, references, |i| repeated[i]),
        regular: subset_bleu(hypotheses, references, |i| !mismatch[i] && !repeated[i]),
    })
}

/// `100 * (new - old) / old`.
pub fn relative_change(old: f64, new: f64) -> Result<f64> {
    if old == 0.0 {
        return Err(Error::InvalidArgument("relative change from zero".into()));
    }
    Ok(100.0 * (new - old) / old)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(50).unwrap()
    }

    #[test]
    fn majority_language() {
        let l = layout();
        assert_eq!(
            detect_language(&[110, 120, 130], &l).detected,
            Some(Lang::Z)
        );
        assert_eq!(
            detect_language(&[110, 120, 130, 7, 8], &l).detected,
            Some(Lang::Z)
        );
        let tie = detect_language(&[110, 120, 7, 8, 1], &l);
        assert_eq!(tie.detected, None);
        assert_eq!(tie.counts.iter().sum::<usize>() + tie.other, 5);
        assert_eq!(detect_language(&[1, 2], &l).detected, None);
    }

    #[test]
    fn ratios_count_cases() {
        let l = layout();
        let good = EvalCase {
            generation: TokenSeq(vec![60, 61]),
            target_lang: Lang::D,
            hit_max: false,
        };
        let bad = EvalCase {
            generation: TokenSeq(vec![7, 8]),
            ..good.clone()
        };
        let mut cases = vec![good.clone(); 38];
        cases.push(bad.clone());
        cases.push(bad);
        let m = compute_error_metrics(&cases, &l).unwrap();
        assert!((m.lmr - 0.05).abs() < 1e-15);
        assert_eq!(m.rr, 0.0);
        let rep = EvalCase {
            generation: TokenSeq(vec![60, 61, 61, 61]),
            target_lang: Lang::D,
            hit_max: true,
        };
        assert_eq!(
            compute_error_metrics(&[rep.clone(), rep], &l).unwrap().rr,
            1.0
        );
        assert!(compute_error_metrics(&[], &l).is_err());
    }

    #[test]
    fn unknown_is_a_mismatch() {
        let c = EvalCase {
            generation: TokenSeq(vec![]),
            target_lang: Lang::E,
            hit_max: false,
        };
        assert_eq!(compute_error_metrics(&[c], &layout()).unwrap().lmr, 1.0);
    }

    #[test]
    fn four_way_sets() {
        let refs: Vec<TokenSeq> = (0..4)
            .map(|i| TokenSeq((10 + i..15 + i).collect()))
            .collect();
        let clean = four_way_split(&refs, &refs, &[false; 4], &[false; 4]).unwrap();
        assert_eq!(clean.regular, clean.origin);
        assert!(clean.language_mismatch.is_none() && clean.repetition.is_none());
        let all = four_way_split(&refs, &refs, &[true; 4], &[false; 4]).unwrap();
        assert!(all.regular.is_none());

        let mut hyps = refs.clone();
        hyps[0] = TokenSeq(vec![90; 5]);
        hyps[3] = TokenSeq(vec![12, 91, 91, 91, 91, 91]);
        let r = four_way_split(
            &hyps,
            &refs,
            &[true, false, false, false],
            &[false, false, false, true],
        )
        .unwrap();
        assert!(r.regular.as_ref().unwrap().bleu > r.origin.as_ref().unwrap().bleu);
        assert_eq!(r.regular.unwrap().count, 2);
    }

    #[test]
    fn relative_change_arithmetic() {
        assert_eq!(relative_change(3.0, 3.0).unwrap(), 0.0);
        assert!((relative_change(0.0486, 0.013203).unwrap() - -72.84).abs() < 0.01);
        assert!(relative_change(0.0, 1.0).is_err());
    }
}
