// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy decoding.

use super::forward::{check_input, embed, forward_chunk, ChunkOptions, KvCache, PositionContext};
use super::{CaptureSpec, InterventionSpec, TokenId, TokenSeq, Weights};
use crate::error::{Error, Result};

/// Output of [`generate`]. The stop token is never included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub tokens: TokenSeq,
    /// True when decoding ended because of the token budget or the
    /// positional table, not because the stop token was produced.
    pub hit_max: bool,
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding with a key/value cache. Edits resolve their selectors
/// against the prompt length, so `GeneratedPositions` applies to the last
/// prompt token and every decoded position.
pub fn generate(
    w: &Weights,
    prompt: &TokenSeq,
    max_new_tokens: usize,
    interventions: &InterventionSpec,
    stop_token: TokenId,
) -> Result<Generation> {
    if max_new_tokens == 0 {
        return Err(Error::InvalidArgument(
            "max_new_tokens must be at least 1".into(),
        ));
    }
    check_input(w, prompt, interventions)?;
    let capture = CaptureSpec::none();
    let opts = ChunkOptions {
        ctx: PositionContext {
            prompt_len: prompt.len(),
        },
        capture: &capture,
        keep: false,
        record_layer_outputs: false,
        logits_from: Some(prompt.len() - 1),
    };
    let mut cache = KvCache::for_weights(w);
    let st = forward_chunk(
        w,
        &mut cache,
        0,
        embed(w, prompt, 0),
        0,
        interventions,
        &opts,
    );
    let mut next = argmax(&st.logits[0]);
    let mut out = Vec::new();
    let one = ChunkOptions {
        logits_from: Some(0),
        ..opts
    };
    loop {
        if next == stop_token {
            return Ok(Generation {
                tokens: TokenSeq(out),
                hit_max: false,
            });
        }
        out.push(next);
        let pos = prompt.len() + out.len() - 1;
        if out.len() == max_new_tokens || pos >= w.config.max_seq_len {
            return Ok(Generation {
                tokens: TokenSeq(out),
                hit_max: true,
            });
        }
        let st = forward_chunk(
            w,
            &mut cache,
            0,
            embed(w, &[next], pos),
            pos,
            interventions,
            &one,
        );
        next = argmax(&st.logits[0]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_decoding_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Weights::random(ModelConfig::new(2, 2, 8, 10, 32), 1.0, &mut rng);
        let prompt = TokenSeq::new(vec![3, 4, 5]);
        let g = generate(&w, &prompt, 6, &InterventionSpec::none(), 99).unwrap();
        assert!(g.hit_max);
        assert_eq!(g.tokens.len(), 6);
        let mut seq = prompt.clone();
        for &t in g.tokens.iter() {
            let out = forward(&w, &seq, &InterventionSpec::none(), &CaptureSpec::none()).unwrap();
            assert_eq!(argmax(out.logits.last().unwrap()), t);
            seq.0.push(t);
        }
    }

    #[test]
    fn stops_at_positional_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Weights::random(ModelConfig::new(1, 2, 8, 10, 6), 1.0, &mut rng);
        let g = generate(
            &w,
            &TokenSeq::new(vec![1, 2]),
            400,
            &InterventionSpec::none(),
            99,
        )
        .unwrap();
        assert!(g.hit_max);
        assert_eq!(g.tokens.len(), 5);
    }

    #[test]
    fn immediate_stop_gives_empty_output() {
        let w = crate::model::Weights::zeros(ModelConfig::new(1, 1, 4, 5, 8));
        // all logits tie, so argmax is token 0
        let g = generate(
            &w,
            &TokenSeq::new(vec![2]),
            10,
            &InterventionSpec::none(),
            0,
        )
        .unwrap();
        assert!(g.tokens.is_empty());
        assert!(!g.hit_max);
    }
}
