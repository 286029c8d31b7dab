// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with activation capture, interventions and a key/value cache.
//!
//! The pass is organised around *chunks*: a run of consecutive positions
//! processed from some `start_layer` upward, attending to whatever is
//! already in the cache. A full forward is one chunk starting at layer 0 on
//! an empty cache; greedy decoding is a prompt chunk followed by one-token
//! chunks; gradient probes re-run only a suffix chunk above a given layer.

use super::intervention::{group_by_layer, LayerEdits, PositionSelector};
use super::tensor::{dot, gelu, gelu_grad, rms_norm_into};
use super::{InterventionSpec, TokenSeq, Weights};
use crate::error::{Error, Result};

/// Resolves prompt-relative selectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionContext {
    pub prompt_len: usize,
}

/// Per-layer keys and values for positions `0..len`.
#[derive(Clone, Debug)]
pub struct KvCache {
    d_model: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        KvCache {
            d_model,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }

    pub fn for_weights(w: &Weights) -> Self {
        KvCache::new(w.config.n_layers, w.config.d_model)
    }

    /// Number of cached positions at `layer`.
    pub fn len_at(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.d_model
    }

    /// Drops cached positions `len..` at layers `from_layer..`.
    pub fn truncate_from(&mut self, from_layer: usize, len: usize) {
        let n = len * self.d_model;
        for l in from_layer..self.keys.len() {
            self.keys[l].truncate(n);
            self.values[l].truncate(n);
        }
    }

    pub fn keys_at(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn values_at(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn truncate(&mut self, len: usize) {
        self.truncate_from(0, len);
    }
}

/// What to record during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptureSpec {
    pub positions: PositionSelector,
    pub heads: bool,
    pub neurons: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        CaptureSpec {
            positions: PositionSelector::ExplicitPositions(Default::default()),
            heads: false,
            neurons: false,
        }
    }

    pub fn heads_at(positions: PositionSelector) -> Self {
        CaptureSpec {
            positions,
            heads: true,
            neurons: false,
        }
    }

    pub fn neurons_at(positions: PositionSelector) -> Self {
        CaptureSpec {
            positions,
            heads: false,
            neurons: true,
        }
    }

    fn active(&self) -> bool {
        self.heads || self.neurons
    }
}

/// Captured head contributions and neuron activations.
///
/// Head contributions live in residual space (`d_model`), after the head's
/// slice of the output projection and after any head edits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub positions: Vec<usize>,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
    heads: Vec<f64>,
    attn_updates: Vec<f64>,
    neurons: Vec<f64>,
}

impl ActivationTrace {
    fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        spec: &CaptureSpec,
        positions: Vec<usize>,
    ) -> Self {
        let p = positions.len();
        ActivationTrace {
            heads: if spec.heads {
                vec![0.0; n_layers * n_heads * p * d_model]
            } else {
                Vec::new()
            },
            attn_updates: if spec.heads {
                vec![0.0; n_layers * p * d_model]
            } else {
                Vec::new()
            },
            neurons: if spec.neurons {
                vec![0.0; n_layers * p * d_ff]
            } else {
                Vec::new()
            },
            positions,
            n_heads,
            d_model,
            d_ff,
        }
    }

    pub fn has_heads(&self) -> bool {
        !self.heads.is_empty()
    }

    pub fn has_neurons(&self) -> bool {
        !self.neurons.is_empty()
    }

    /// Index of an absolute position within the captured list.
    pub fn index_of(&self, pos: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p == pos)
    }

    fn head_offset(&self, layer: usize, head: usize, pidx: usize) -> usize {
        ((layer * self.n_heads + head) * self.positions.len() + pidx) * self.d_model
    }

    /// Contribution of `head` at `layer` for the `pidx`-th captured position.
    pub fn head(&self, layer: usize, head: usize, pidx: usize) -> &[f64] {
        let o = self.head_offset(layer, head, pidx);
        &self.heads[o..o + self.d_model]
    }

    /// Full attention update of `layer` at the `pidx`-th captured position.
    pub fn attn_update(&self, layer: usize, pidx: usize) -> &[f64] {
        let o = (layer * self.positions.len() + pidx) * self.d_model;
        &self.attn_updates[o..o + self.d_model]
    }

    /// All neuron activations of `layer` at the `pidx`-th captured position.
    pub fn neurons_at(&self, layer: usize, pidx: usize) -> &[f64] {
        let o = (layer * self.positions.len() + pidx) * self.d_ff;
        &self.neurons[o..o + self.d_ff]
    }

    pub fn neuron(&self, layer: usize, neuron: usize, pidx: usize) -> f64 {
        self.neurons_at(layer, pidx)[neuron]
    }

    fn head_mut(&mut self, layer: usize, head: usize, pidx: usize) -> &mut [f64] {
        let o = self.head_offset(layer, head, pidx);
        &mut self.heads[o..o + self.d_model]
    }
}

/// Logits for every input position plus the requested trace.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    pub trace: ActivationTrace,
}

/// Saved intermediates of one layer over a chunk (for the backward pass).
#[derive(Clone, Debug)]
pub(crate) struct LayerSaved {
    pub x_in: Vec<f64>,
    pub inv1: Vec<f64>,
    pub xh1: Vec<f64>,
    pub q: Vec<f64>,
    /// `probs[i * n_heads + h]` over keys `0..=start_pos + i`.
    pub probs: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    /// Heads whose contribution was replaced (no gradient into internals).
    pub head_replaced: Vec<bool>,
    pub x_mid: Vec<f64>,
    pub inv2: Vec<f64>,
    pub xh2: Vec<f64>,
    pub act: Vec<f64>,
    /// d(act_effective)/d(pre) per (position, neuron).
    pub dact_dpre: Vec<f64>,
}

/// Result of a chunk forward.
#[derive(Clone, Debug)]
pub struct ChunkState {
    pub start_pos: usize,
    pub n: usize,
    pub start_layer: usize,
    /// Chunk-relative index of the first position with logits.
    pub logits_from: usize,
    pub logits: Vec<Vec<f64>>,
    /// Residual stream leaving each layer `start_layer..`, when recorded.
    pub layer_outputs: Vec<Vec<f64>>,
    pub trace: ActivationTrace,
    pub(crate) saved: Vec<LayerSaved>,
    pub(crate) x_final: Vec<f64>,
    pub(crate) inv_final: Vec<f64>,
    pub(crate) xh_final: Vec<f64>,
}

/// Token plus position embeddings for `tokens` placed at `start_pos..`.
pub fn embed(w: &Weights, tokens: &[u32], start_pos: usize) -> Vec<f64> {
    let d = w.config.d_model;
    let mut x = vec![0.0; tokens.len() * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        for ((r, a), b) in row
            .iter_mut()
            .zip(w.tok_emb.row(t as usize))
            .zip(w.pos_emb.row(start_pos + i))
        {
            *r = a + b;
        }
    }
    x
}

/// Options controlling a chunk forward.
#[derive(Clone, Debug)]
pub struct ChunkOptions<'a> {
    pub ctx: PositionContext,
    pub capture: &'a CaptureSpec,
    /// Keep intermediates for [`super::backward_chunk`].
    pub keep: bool,
    pub record_layer_outputs: bool,
    /// Chunk-relative index from which logits are computed; `None` skips them.
    pub logits_from: Option<usize>,
}

/// Runs `x_in` (residual entering `start_layer`, before that layer's
/// residual edits) through layers `start_layer..` for positions
/// `start_pos..start_pos + n`, appending keys/values to `cache`.
#[allow(clippy::too_many_arguments)]
pub fn forward_chunk(
    w: &Weights,
    cache: &mut KvCache,
    start_layer: usize,
    mut x: Vec<f64>,
    start_pos: usize,
    spec: &InterventionSpec,
    opts: &ChunkOptions<'_>,
) -> ChunkState {
    let cfg = &w.config;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let nh = cfg.n_heads;
    let dff = cfg.d_ff;
    let n = x.len() / d;
    let prompt_len = opts.ctx.prompt_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let edits = group_by_layer(spec, cfg.n_layers);

    let capture_idx: Vec<Option<usize>> = (0..n)
        .map(|i| {
            let p = start_pos + i;
            if opts.capture.active() && opts.capture.positions.contains(p, prompt_len) {
                Some(p)
            } else {
                None
            }
        })
        .collect();
    let cap_positions: Vec<usize> = capture_idx.iter().flatten().copied().collect();
    let mut pidx_of = vec![usize::MAX; n];
    {
        let mut k = 0;
        for (i, c) in capture_idx.iter().enumerate() {
            if c.is_some() {
                pidx_of[i] = k;
                k += 1;
            }
        }
    }
    let mut trace = ActivationTrace::new(cfg.n_layers, nh, d, dff, opts.capture, cap_positions);

    let mut saved = Vec::new();
    let mut layer_outputs = Vec::new();
    let mut xh = vec![0.0; d];
    let mut contrib = vec![0.0; d];
    let mut pre = vec![0.0; dff];

    for layer in start_layer..cfg.n_layers {
        let lw = &w.layers[layer];
        let le: &LayerEdits<'_> = &edits[layer];

        for (sel, v) in &le.residual {
            for i in 0..n {
                if sel.contains(start_pos + i, prompt_len) {
                    for (a, b) in x[i * d..(i + 1) * d].iter_mut().zip(v.iter()) {
                        *a += b;
                    }
                }
            }
        }

        let mut inv1 = vec![0.0; n];
        let mut xh1 = if opts.keep {
            vec![0.0; n * d]
        } else {
            Vec::new()
        };
        let mut q = vec![0.0; n * d];
        debug_assert_eq!(
            cache.len_at(layer),
            start_pos,
            "cache length at layer {layer}"
        );
        let mut kbuf = vec![0.0; d];
        let mut vbuf = vec![0.0; d];
        for i in 0..n {
            inv1[i] = rms_norm_into(&x[i * d..(i + 1) * d], &lw.attn_norm, cfg.norm_eps, &mut xh);
            lw.w_q.matvec_into(&xh, &mut q[i * d..(i + 1) * d]);
            lw.w_k.matvec_into(&xh, &mut kbuf);
            lw.w_v.matvec_into(&xh, &mut vbuf);
            cache.keys[layer].extend_from_slice(&kbuf);
            cache.values[layer].extend_from_slice(&vbuf);
            if opts.keep {
                xh1[i * d..(i + 1) * d].copy_from_slice(&xh);
            }
        }

        let keys = &cache.keys[layer];
        let values = &cache.values[layer];
        let mut probs_saved = if opts.keep {
            Vec::with_capacity(n * nh)
        } else {
            Vec::new()
        };
        let mut z = vec![0.0; n * d];
        let mut head_replaced = if opts.keep {
            vec![false; n * nh]
        } else {
            Vec::new()
        };
        let mut x_mid = x.clone();
        let mut scores = Vec::new();
        for i in 0..n {
            let p = start_pos + i;
            let nk = p + 1;
            for h in 0..nh {
                let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    let s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                    if s > max {
                        max = s;
                    }
                    scores.push(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let zh = &mut z[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s /= sum;
                    let a = *s;
                    if a != 0.0 {
                        for (zc, vc) in zh
                            .iter_mut()
                            .zip(&values[j * d + h * dh..j * d + (h + 1) * dh])
                        {
                            *zc += a * vc;
                        }
                    }
                }
                if opts.keep {
                    probs_saved.push(scores.clone());
                }
            }

            // Per-head contributions in residual space.
            let capture_heads = opts.capture.heads && capture_idx[i].is_some();
            let xm = &mut x_mid[i * d..(i + 1) * d];
            for h in 0..nh {
                let zh = &z[i * d + h * dh..i * d + (h + 1) * dh];
                for (r, c) in contrib.iter_mut().enumerate() {
                    *c = dot(&lw.w_o.row(r)[h * dh..(h + 1) * dh], zh);
                }
                if le.touches_heads() {
                    for (hh, sel, v) in &le.head_replace {
                        if *hh == h && sel.contains(p, prompt_len) {
                            contrib.copy_from_slice(v);
                            if opts.keep {
                                head_replaced[i * nh + h] = true;
                            }
                        }
                    }
                    for (hh, sel, v) in &le.head_add {
                        if *hh == h && sel.contains(p, prompt_len) {
                            for (c, a) in contrib.iter_mut().zip(v.iter()) {
                                *c += a;
                            }
                        }
                    }
                }
                for (a, c) in xm.iter_mut().zip(&contrib) {
                    *a += c;
                }
                if capture_heads {
                    trace
                        .head_mut(layer, h, pidx_of[i])
                        .copy_from_slice(&contrib);
                }
            }
            if capture_heads {
                let o = (layer * trace.positions.len() + pidx_of[i]) * d;
                for c in 0..d {
                    trace.attn_updates[o + c] = xm[c] - x[i * d + c];
                }
            }
        }

        // Feed-forward block.
        let mut inv2 = vec![0.0; n];
        let mut xh2 = if opts.keep {
            vec![0.0; n * d]
        } else {
            Vec::new()
        };
        let mut act_all = if opts.keep {
            vec![0.0; n * dff]
        } else {
            Vec::new()
        };
        let mut dact = if opts.keep {
            vec![0.0; n * dff]
        } else {
            Vec::new()
        };
        let mut x_out = x_mid.clone();
        let mut act = vec![0.0; dff];
        for i in 0..n {
            let p = start_pos + i;
            inv2[i] = rms_norm_into(
                &x_mid[i * d..(i + 1) * d],
                &lw.ffn_norm,
                cfg.norm_eps,
                &mut xh,
            );
            lw.w_up.matvec_into(&xh, &mut pre);
            for (a, &z) in act.iter_mut().zip(&pre) {
                *a = gelu(z);
            }
            if opts.keep {
                for (g, &z) in dact[i * dff..(i + 1) * dff].iter_mut().zip(&pre) {
                    *g = gelu_grad(z);
                }
            }
            for (nn, sel, v) in &le.clamp {
                if sel.contains(p, prompt_len) {
                    act[*nn] = *v;
                    if opts.keep {
                        dact[i * dff + nn] = 0.0;
                    }
                }
            }
            for (nn, sel, f) in &le.scale {
                if sel.contains(p, prompt_len) {
                    act[*nn] *= f;
                    if opts.keep {
                        dact[i * dff + nn] *= f;
                    }
                }
            }
            if opts.capture.neurons && capture_idx[i].is_some() {
                let o = (layer * trace.positions.len() + pidx_of[i]) * dff;
                trace.neurons[o..o + dff].copy_from_slice(&act);
            }
            let xo = &mut x_out[i * d..(i + 1) * d];
            for (r, o) in xo.iter_mut().enumerate() {
                *o += dot(lw.w_down.row(r), &act);
            }
            if opts.keep {
                xh2[i * d..(i + 1) * d].copy_from_slice(&xh);
                act_all[i * dff..(i + 1) * dff].copy_from_slice(&act);
            }
        }

        if opts.keep {
            saved.push(LayerSaved {
                x_in: std::mem::take(&mut x),
                inv1,
                xh1,
                q,
                probs: probs_saved,
                z,
                head_replaced,
                x_mid,
                inv2,
                xh2,
                act: act_all,
                dact_dpre: dact,
            });
        }
        if opts.record_layer_outputs {
            layer_outputs.push(x_out.clone());
        }
        x = x_out;
    }

    // Final norm and unembedding.
    let mut logits = Vec::new();
    let mut inv_final = Vec::new();
    let mut xh_final = Vec::new();
    let logits_from = opts.logits_from.unwrap_or(n);
    for i in logits_from.min(n)..n {
        let inv = rms_norm_into(&x[i * d..(i + 1) * d], &w.final_norm, cfg.norm_eps, &mut xh);
        logits.push(w.unembed.matvec(&xh));
        if opts.keep {
            inv_final.push(inv);
            xh_final.extend_from_slice(&xh);
        }
    }

    ChunkState {
        start_pos,
        n,
        start_layer,
        logits_from: logits_from.min(n),
        logits,
        layer_outputs,
        trace,
        saved,
        x_final: if opts.keep { x } else { Vec::new() },
        inv_final,
        xh_final,
    }
}

pub(crate) fn check_input(w: &Weights, tokens: &[u32], spec: &InterventionSpec) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if tokens.len() > w.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: w.config.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= w.config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: w.config.vocab_size,
        });
    }
    spec.validate(&w.config)
}

/// Full forward pass; every position counts as prompt.
pub fn forward(
    w: &Weights,
    tokens: &TokenSeq,
    interventions: &InterventionSpec,
    capture: &CaptureSpec,
) -> Result<ForwardOutput> {
    forward_with_context(
        w,
        tokens,
        interventions,
        capture,
        PositionContext {
            prompt_len: tokens.len(),
        },
    )
}

/// Full forward pass with an explicit prompt length for selector resolution.
pub fn forward_with_context(
    w: &Weights,
    tokens: &TokenSeq,
    interventions: &InterventionSpec,
    capture: &CaptureSpec,
    ctx: PositionContext,
) -> Result<ForwardOutput> {
    check_input(w, tokens, interventions)?;
    let mut cache = KvCache::for_weights(w);
    let x = embed(w, tokens, 0);
    let st = forward_chunk(
        w,
        &mut cache,
        0,
        x,
        0,
        interventions,
        &ChunkOptions {
            ctx,
            capture,
            keep: false,
            record_layer_outputs: false,
            logits_from: Some(0),
        },
    );
    Ok(ForwardOutput {
        logits: st.logits,
        trace: st.trace,
    })
}
