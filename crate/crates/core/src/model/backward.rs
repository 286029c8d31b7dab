// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients through a chunk forward.
//!
//! Keys and values of cached prefix positions are treated as constants, so
//! a chunk that starts at position 0 yields exact gradients, and a suffix
//! chunk yields gradients with respect to its own inputs.

use super::forward::{ChunkState, KvCache};
use super::tensor::{dot, rms_norm_backward};
use super::{ModelConfig, Weights};

/// Parameter gradients, shaped like [`Weights`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Weights);

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut w = Weights::zeros(config.clone());
        w.final_norm.iter_mut().for_each(|g| *g = 0.0);
        for l in &mut w.layers {
            l.attn_norm.iter_mut().for_each(|g| *g = 0.0);
            l.ffn_norm.iter_mut().for_each(|g| *g = 0.0);
        }
        Gradients(w)
    }

    /// Adds the gradient of the chunk input into the embedding tables.
    pub fn add_embedding(&mut self, tokens: &[u32], start_pos: usize, d_input: &[f64]) {
        let d = self.0.config.d_model;
        for (i, &t) in tokens.iter().enumerate() {
            let g = &d_input[i * d..(i + 1) * d];
            for (a, b) in self.0.tok_emb.row_mut(t as usize).iter_mut().zip(g) {
                *a += b;
            }
            for (a, b) in self.0.pos_emb.row_mut(start_pos + i).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Gradients) {
        let mut src = Vec::new();
        other.0.for_each_tensor(|_, d| src.push(d.to_vec()));
        let mut i = 0;
        self.0.for_each_tensor_mut(|_, d| {
            for (a, b) in d.iter_mut().zip(&src[i]) {
                *a += b;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, s: f64) {
        self.0
            .for_each_tensor_mut(|_, d| d.iter_mut().for_each(|x| *x *= s));
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.0
            .for_each_tensor(|_, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Result of [`backward_chunk`].
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    /// `d_resid[k]` is the gradient at the input of layer `start_layer + k`;
    /// the last entry is the gradient at the final norm input.
    pub d_resid: Vec<Vec<f64>>,
    pub grads: Option<Gradients>,
}

impl BackwardOutput {
    /// Gradient on the residual stream leaving `layer`.
    pub fn d_layer_output(&self, start_layer: usize, layer: usize) -> &[f64] {
        &self.d_resid[layer + 1 - start_layer]
    }
}

/// Backpropagates `dlogits` (aligned with `state.logits`) through the chunk.
///
/// `state` must come from a forward with `keep = true` on the same `cache`.
pub fn backward_chunk(
    w: &Weights,
    cache: &KvCache,
    state: &ChunkState,
    dlogits: &[Vec<f64>],
    want_params: bool,
) -> BackwardOutput {
    let cfg = &w.config;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let nh = cfg.n_heads;
    let dff = cfg.d_ff;
    let n = state.n;
    let sp = state.start_pos;
    let scale = 1.0 / (dh as f64).sqrt();
    assert_eq!(
        state.saved.len(),
        cfg.n_layers - state.start_layer,
        "forward was not run with keep"
    );
    let mut grads = want_params.then(|| Gradients::zeros(cfg));

    // Final norm and unembedding.
    let mut dx = vec![0.0; n * d];
    let mut dxh = vec![0.0; d];
    for (k, dl) in dlogits.iter().enumerate() {
        let i = state.logits_from + k;
        let xh = &state.xh_final[k * d..(k + 1) * d];
        dxh.iter_mut().for_each(|x| *x = 0.0);
        w.unembed.matvec_t_acc(dl, &mut dxh);
        let dgain = grads.as_mut().map(|g| {
            g.0.unembed.add_outer(dl, xh);
            &mut g.0.final_norm[..]
        });
        rms_norm_backward(
            &state.x_final[i * d..(i + 1) * d],
            &w.final_norm,
            state.inv_final[k],
            &dxh,
            &mut dx[i * d..(i + 1) * d],
            dgain,
        );
    }

    let mut d_resid = vec![dx.clone()];
    for layer in (state.start_layer..cfg.n_layers).rev() {
        let s = &state.saved[layer - state.start_layer];
        let lw = &w.layers[layer];
        let mut gl = grads.as_mut().map(|g| &mut g.0.layers[layer]);

        // Feed-forward block.
        let mut dx_mid = dx.clone();
        let mut dact = vec![0.0; dff];
        let mut dpre = vec![0.0; dff];
        let mut dxh2 = vec![0.0; d];
        for i in 0..n {
            let g = &dx[i * d..(i + 1) * d];
            dact.iter_mut().for_each(|x| *x = 0.0);
            lw.w_down.matvec_t_acc(g, &mut dact);
            for ((p, a), m) in dpre
                .iter_mut()
                .zip(&dact)
                .zip(&s.dact_dpre[i * dff..(i + 1) * dff])
            {
                *p = a * m;
            }
            dxh2.iter_mut().for_each(|x| *x = 0.0);
            lw.w_up.matvec_t_acc(&dpre, &mut dxh2);
            if let Some(gl) = gl.as_mut() {
                gl.w_down.add_outer(g, &s.act[i * dff..(i + 1) * dff]);
                gl.w_up.add_outer(&dpre, &s.xh2[i * d..(i + 1) * d]);
            }
            rms_norm_backward(
                &s.x_mid[i * d..(i + 1) * d],
                &lw.ffn_norm,
                s.inv2[i],
                &dxh2,
                &mut dx_mid[i * d..(i + 1) * d],
                gl.as_mut().map(|g| &mut g.ffn_norm[..]),
            );
        }

        // Attention block.
        let keys = cache_keys(cache, layer);
        let values = cache_values(cache, layer);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dz = vec![0.0; d];
        let mut zmask = vec![0.0; d];
        let mut da = Vec::new();
        for i in 0..n {
            let g = &dx_mid[i * d..(i + 1) * d];
            dz.iter_mut().for_each(|x| *x = 0.0);
            lw.w_o.matvec_t_acc(g, &mut dz);
            zmask.copy_from_slice(&s.z[i * d..(i + 1) * d]);
            for h in 0..nh {
                if s.head_replaced[i * nh + h] {
                    dz[h * dh..(h + 1) * dh].iter_mut().for_each(|x| *x = 0.0);
                    zmask[h * dh..(h + 1) * dh]
                        .iter_mut()
                        .for_each(|x| *x = 0.0);
                }
            }
            if let Some(gl) = gl.as_mut() {
                gl.w_o.add_outer(g, &zmask);
            }
            let p = sp + i;
            for h in 0..nh {
                let dzh = &dz[h * dh..(h + 1) * dh];
                if dzh.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let a = &s.probs[i * nh + h];
                da.clear();
                let mut sum = 0.0;
                for (j, &aj) in a.iter().enumerate() {
                    let v = dot(dzh, &values[j * d + h * dh..j * d + (h + 1) * dh]);
                    sum += aj * v;
                    da.push(v);
                }
                let qh = &s.q[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..=p {
                    let ds = a[j] * (da[j] - sum) * scale;
                    if ds != 0.0 {
                        let kj = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                        for (x, k) in dq[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().zip(kj) {
                            *x += ds * k;
                        }
                    }
                    if j >= sp {
                        let jj = j - sp;
                        if ds != 0.0 {
                            for (x, q) in dk[jj * d + h * dh..jj * d + (h + 1) * dh]
                                .iter_mut()
                                .zip(qh)
                            {
                                *x += ds * q;
                            }
                        }
                        let aj = a[j];
                        for (x, z) in dv[jj * d + h * dh..jj * d + (h + 1) * dh]
                            .iter_mut()
                            .zip(dzh)
                        {
                            *x += aj * z;
                        }
                    }
                }
            }
        }
        let mut dx_in = dx_mid.clone();
        let mut dxh1 = vec![0.0; d];
        for i in 0..n {
            dxh1.iter_mut().for_each(|x| *x = 0.0);
            let (gq, gk, gv) = (
                &dq[i * d..(i + 1) * d],
                &dk[i * d..(i + 1) * d],
                &dv[i * d..(i + 1) * d],
            );
            lw.w_q.matvec_t_acc(gq, &mut dxh1);
            lw.w_k.matvec_t_acc(gk, &mut dxh1);
            lw.w_v.matvec_t_acc(gv, &mut dxh1);
            if let Some(gl) = gl.as_mut() {
                let xh = &s.xh1[i * d..(i + 1) * d];
                gl.w_q.add_outer(gq, xh);
                gl.w_k.add_outer(gk, xh);
                gl.w_v.add_outer(gv, xh);
            }
            rms_norm_backward(
                &s.x_in[i * d..(i + 1) * d],
                &lw.attn_norm,
                s.inv1[i],
                &dxh1,
                &mut dx_in[i * d..(i + 1) * d],
                gl.as_mut().map(|g| &mut g.attn_norm[..]),
            );
        }
        dx = dx_in;
        d_resid.push(dx.clone());
    }
    d_resid.reverse();
    BackwardOutput { d_resid, grads }
}

fn cache_keys(cache: &KvCache, layer: usize) -> &[f64] {
    cache.keys_at(layer)
}

fn cache_values(cache: &KvCache, layer: usize) -> &[f64] {
    cache.values_at(layer)
}
