// SPDX-License-Identifier: MIT OR Apache-2.0

//! Re-running the tail of a sequence above a given layer.

use crate::error::Result;
use crate::model::{
    embed, forward_chunk, CaptureSpec, ChunkOptions, InterventionSpec, KvCache, Objective,
    PositionContext, TokenSeq, Weights,
};

/// Caches everything before `start` and the per-layer residual inputs of
/// positions `start..`, so an edit confined to those positions and to
/// layers `>= l` only needs layers `l..` recomputed.
pub(crate) struct SuffixRunner<'a> {
    w: &'a Weights,
    ctx: PositionContext,
    start: usize,
    cache: KvCache,
    layer_inputs: Vec<Vec<f64>>,
    logits_from: usize,
    pub base_logits: Vec<Vec<f64>>,
}

impl<'a> SuffixRunner<'a> {
    pub fn new(w: &'a Weights, prompt: &TokenSeq, obj: &Objective, start: usize) -> Result<Self> {
        let input = obj.input_tokens(prompt);
        let none = InterventionSpec::none();
        if prompt.is_empty() {
            return Err(crate::error::Error::Empty("prompt"));
        }
        if obj.target.is_empty() {
            return Err(crate::error::Error::Empty("target"));
        }
        crate::model::check_input(w, &input, &none)?;
        let ctx = PositionContext {
            prompt_len: prompt.len(),
        };
        let cap = CaptureSpec::none();
        let mut cache = KvCache::for_weights(w);
        if start > 0 {
            forward_chunk(
                w,
                &mut cache,
                0,
                embed(w, &input[..start], 0),
                0,
                &none,
                &ChunkOptions {
                    ctx,
                    capture: &cap,
                    keep: false,
                    record_layer_outputs: false,
                    logits_from: None,
                },
            );
        }
        let x0 = embed(w, &input[start..], start);
        let logits_from = prompt.len() - 1 - start;
        let st = forward_chunk(
            w,
            &mut cache,
            0,
            x0.clone(),
            start,
            &none,
            &ChunkOptions {
                ctx,
                capture: &cap,
                keep: false,
                record_layer_outputs: true,
                logits_from: Some(logits_from),
            },
        );
        cache.truncate(start);
        let mut layer_inputs = vec![x0];
        layer_inputs.extend(st.layer_outputs.into_iter().take(w.config.n_layers - 1));
        Ok(SuffixRunner {
            w,
            ctx,
            start,
            cache,
            layer_inputs,
            logits_from,
            base_logits: st.logits,
        })
    }

    /// Logits of the scored positions with `spec` active at layers `layer..`.
    pub fn run(&mut self, layer: usize, spec: &InterventionSpec) -> Vec<Vec<f64>> {
        let cap = CaptureSpec::none();
        let st = forward_chunk(
            self.w,
            &mut self.cache,
            layer,
            self.layer_inputs[layer].clone(),
            self.start,
            spec,
            &ChunkOptions {
                ctx: self.ctx,
                capture: &cap,
                keep: false,
                record_layer_outputs: false,
                logits_from: Some(self.logits_from),
            },
        );
        self.cache.truncate_from(layer, self.start);
        st.logits
    }
}
