// SPDX-License-Identifier: MIT OR Apache-2.0

//! Suffix-repetition detection.

use serde::{Deserialize, Serialize};

use crate::model::{TokenId, TokenSeq};

/// Decomposition `y_norm ‖ y_repe^k ‖ y_rest` of a generation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionVerdict {
    pub flagged: bool,
    pub y_norm: TokenSeq,
    pub y_repe: TokenSeq,
    /// Always empty: only repeats that run to the end are detected.
    pub y_rest: TokenSeq,
    /// Index of the second occurrence of `y_repe`.
    pub onset: usize,
    /// Number of whole repetitions of the unit at the end.
    pub repeats: usize,
}

/// Smallest period `q` such that `y` ends in `u u` with `u` the last `q`
/// tokens, and how many whole copies of `u` end the sequence.
pub fn suffix_period(y: &[TokenId]) -> Option<(usize, usize)> {
    let n = y.len();
    for q in 1..=n / 2 {
        if y[n - q..] == y[n - 2 * q..n - q] {
            let mut k = 2;
            while (k + 1) * q <= n && y[n - (k + 1) * q..n - k * q] == y[n - q..] {
                k += 1;
            }
            return Some((q, k));
        }
    }
    None
}

/// Flags generations that hit the token budget while looping on a unit.
pub fn detect_repetition(generated: &[TokenId], hit_max: bool) -> RepetitionVerdict {
    if !hit_max {
        return RepetitionVerdict::default();
    }
    match suffix_period(generated) {
        None => RepetitionVerdict::default(),
        Some((q, k)) => {
            let n = generated.len();
            let onset = n - (k - 1) * q;
            RepetitionVerdict {
                flagged: true,
                y_norm: TokenSeq(generated[..onset - q].to_vec()),
                y_repe: TokenSeq(generated[n - q..].to_vec()),
                y_rest: TokenSeq::default(),
                onset,
                repeats: k,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive scan: every (period, start) pair whose tail is a whole
    /// power of the period's unit, shortest period first, earliest start.
    fn brute(y: &[TokenId]) -> Option<(Vec<TokenId>, Vec<TokenId>, usize)> {
        let n = y.len();
        for q in 1..=n / 2 {
            for s in 0..n {
                let tail = &y[s..];
                if tail.len() < 2 * q || tail.len() % q != 0 {
                    continue;
                }
                let unit = &tail[..q];
                if tail.chunks(q).all(|c| c == unit) {
                    return Some((y[..s].to_vec(), unit.to_vec(), s + q));
                }
            }
        }
        None
    }

    #[test]
    fn worked_example() {
        let v = detect_repetition(&[10, 11, 12, 13, 12, 13, 12, 13], true);
        assert!(v.flagged);
        assert_eq!(v.y_repe.0, vec![12, 13]);
        assert_eq!(v.y_norm.0, vec![10, 11]);
        assert_eq!(v.onset, 4);
        assert!(v.y_rest.is_empty());
    }

    #[test]
    fn needs_hit_max_and_shortest_unit() {
        assert!(!detect_repetition(&[1, 2, 1, 2], false).flagged);
        let v = detect_repetition(&[7; 9], true);
        assert_eq!(v.y_repe.0, vec![7]);
        assert!(v.y_norm.is_empty());
        assert!(!detect_repetition(&[1, 2, 3], true).flagged);
    }

    fn near_periodic() -> impl Strategy<Value = Vec<TokenId>> {
        (
            prop::collection::vec(0u32..3, 0..12),
            prop::collection::vec(0u32..3, 1..5),
            1usize..12,
            prop::collection::vec(0u32..3, 0..3),
        )
            .prop_map(|(pre, unit, k, noise)| {
                let mut v = pre;
                for _ in 0..k {
                    v.extend_from_slice(&unit);
                }
                v.extend(noise);
                v.truncate(64);
                v
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_exhaustive_scan(y in prop_oneof![prop::collection::vec(0u32..4, 0..64), near_periodic()]) {
            let v = detect_repetition(&y, true);
            match brute(&y) {
                None => prop_assert!(!v.flagged),
                Some((norm_plus, unit, onset)) => {
                    prop_assert!(v.flagged);
                    prop_assert_eq!(&v.y_repe.0, &unit);
                    prop_assert_eq!(v.onset, onset);
                    // brute returns the prefix before the first copy
                    prop_assert_eq!(&v.y_norm.0, &norm_plus);
                    let mut rebuilt = v.y_norm.0.clone();
                    for _ in 0..v.repeats {
                        rebuilt.extend_from_slice(&v.y_repe);
                    }
                    prop_assert_eq!(rebuilt, y);
                }
            }
        }
    }
}
