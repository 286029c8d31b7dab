// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired models with a known mechanism.
//!
//! The residual stream is split into labelled subspaces. One huge constant
//! coordinate dominates the RMS, so after normalisation every layer reads
//! `x / rho` with `rho` fixed, and weights that read the residual are
//! simply multiplied by `rho`. Two redundant copy/match circuits make the
//! model robust to removing any single head of theirs; only the planted
//! task head carries the target language.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, VocabLayout, NL, SEP};
use crate::error::{Error, Result};
use crate::locate::Coord;
use crate::model::{ModelConfig, Weights};

pub const LANGUAGE_CONTRACT: &str = "planted-language-head/1";
pub const REPETITION_CONTRACT: &str = "planted-repetition-neuron/1";

/// What was planted, for checking a locator against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroundTruth {
    pub contract: String,
    pub seed: u64,
    pub heads: Vec<Coord>,
    pub neurons: Vec<Coord>,
    /// Largest cosine between two word codes.
    pub max_coherence: f64,
}

impl PlantedGroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Configuration the factories are designed around.
pub fn planted_config(layout: &VocabLayout) -> ModelConfig {
    let mut c = ModelConfig::new(4, 4, 128, layout.vocab_size(), 512);
    c.d_ff = 256;
    c
}

const B: f64 = 1e5;
const P0: f64 = 100.0;
const CODE_DIM: usize = 16;
const N_HOT: usize = 12;
const N_NOISE: usize = 16;
const MAX_COHERENCE: f64 = 0.7;

// residual layout
const CONST: usize = 0;
const POS: usize = 1;
const SINK: usize = 2;
const LANG: usize = 3;
const TAGLANG: usize = 6;
const NLD: usize = 9;
const SEPD: usize = 10;
const TAG: usize = 11;
const CODE: usize = 12;
const OFF: [usize; 2] = [28, 29];
const HOT: [usize; 2] = [30, 30 + N_HOT];
const OUT_CODE: usize = 30 + 2 * N_HOT;
const OUT_LANG: usize = OUT_CODE + CODE_DIM;
const OUT_NL: usize = OUT_LANG + 3;
const EV: [usize; 2] = [OUT_NL + 1, OUT_NL + 2];
const TASK: usize = OUT_NL + 3;
const TLANG: usize = TASK + 1;
const RFLAG: usize = TLANG + 3;
const RMODE: usize = RFLAG + 1;
const GATE: usize = RMODE + 1;
const NOISE: usize = GATE + 1;
const N_DIMS: usize = NOISE + N_NOISE;

const BUMP_SIGMA: f64 = 20.0;
const GATE_SIGMA: f64 = 40.0;
const GATE_LO: f64 = 0.35;
const GATE_HI: f64 = 0.7;

struct Planter {
    w: Weights,
    rho: f64,
    sqrt_dh: f64,
    dh: usize,
}

impl Planter {
    /// Query row `r` of head `(l, h)`: `q_r = sum c * x_dim`.
    fn q(&mut self, l: usize, h: usize, r: usize, terms: &[(usize, f64)]) {
        let s = self.rho * self.sqrt_dh;
        let row = h * self.dh + r;
        for &(dim, c) in terms {
            let c = if dim == CONST { c / B } else { c };
            self.w.layers[l].w_q.set(row, dim, c * s);
        }
    }

    fn k(&mut self, l: usize, h: usize, r: usize, terms: &[(usize, f64)]) {
        let row = h * self.dh + r;
        for &(dim, c) in terms {
            let c = if dim == CONST { c / B } else { c };
            self.w.layers[l].w_k.set(row, dim, c * self.rho);
        }
    }

    /// Value row `r` reads `terms`; the output writes `gain * v_r` into `dst`.
    fn vo(&mut self, l: usize, h: usize, r: usize, terms: &[(usize, f64)], dst: usize, gain: f64) {
        let row = h * self.dh + r;
        for &(dim, c) in terms {
            self.w.layers[l].w_v.set(row, dim, c * self.rho);
        }
        self.w.layers[l].w_o.set(dst, row, gain);
    }

    /// Neuron `n` of layer `l`: pre-activation `sum c * x_dim + bias`.
    fn up(&mut self, l: usize, n: usize, terms: &[(usize, f64)], bias: f64) {
        for &(dim, c) in terms {
            self.w.layers[l].w_up.set(n, dim, c * self.rho);
        }
        self.w.layers[l].w_up.set(n, CONST, bias * self.rho / B);
    }

    fn down(&mut self, l: usize, n: usize, dst: usize, c: f64) {
        let m = &mut self.w.layers[l].w_down;
        m.set(dst, n, m.get(dst, n) + c);
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normalise(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Unit word codes pushed apart until the largest pairwise cosine is small.
fn word_codes(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, f64) {
    let mut codes: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..CODE_DIM).map(|_| gaussian(rng)).collect();
            normalise(&mut v);
            v
        })
        .collect();
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..300 {
        let snapshot = codes.clone();
        for i in 0..n {
            let mut push = vec![0.0; CODE_DIM];
            for j in 0..n {
                if i != j {
                    let c = cos(&snapshot[i], &snapshot[j]);
                    if c > 0.0 {
                        for (p, y) in push.iter_mut().zip(&snapshot[j]) {
                            *p += c.powi(3) * y;
                        }
                    }
                }
            }
            for (x, p) in codes[i].iter_mut().zip(&push) {
                *x -= 0.2 * p;
            }
            normalise(&mut codes[i]);
        }
    }
    let mut c_max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            c_max = c_max.max(cos(&codes[i], &codes[j]));
        }
    }
    (codes, c_max.max(0.0))
}

fn is_identity(layout: &VocabLayout) -> bool {
    layout
        .perm
        .iter()
        .all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
}

/// Rejects configurations the construction cannot be wired into.
fn check_feasible(config: &ModelConfig, layout: &VocabLayout) -> Result<()> {
    config.validate()?;
    let bad = |m: String| Err(Error::Infeasible(m));
    if config.n_layers < 4 || config.n_heads < 4 {
        return bad(format!(
            "need at least 4 layers and 4 heads, got {}x{}",
            config.n_layers, config.n_heads
        ));
    }
    if config.d_model < N_DIMS || config.d_head() < 31 {
        return bad(format!(
            "need d_model >= {N_DIMS} and d_head >= 31, got {} / {}",
            config.d_model,
            config.d_head()
        ));
    }
    if config.d_ff < 2 * (N_HOT + 2) + 4 {
        return bad(format!("d_ff {} too small", config.d_ff));
    }
    if config.vocab_size < layout.vocab_size() {
        return bad(format!(
            "vocab {} smaller than layout {}",
            config.vocab_size,
            layout.vocab_size()
        ));
    }
    if config.max_seq_len < 32 {
        return bad("max_seq_len below 32".into());
    }
    if !is_identity(layout) {
        return bad(
            "word codes are shared across languages, so the layout must be unpermuted".into(),
        );
    }
    Ok(())
}

/// Slots taken by the mechanism, per layer.
struct Slots {
    task_head: usize,
    repeat_head: usize,
    repeat_neuron: usize,
}

fn slots(config: &ModelConfig, seed: u64, rng: &mut ChaCha8Rng) -> Slots {
    let task_head = (seed % 4) as usize;
    let repeat_head = (task_head + 1 + ((seed / 4) % 3) as usize) % 4;
    Slots {
        task_head,
        repeat_head,
        repeat_neuron: rng.gen_range(0..config.d_ff),
    }
}

fn build(
    config: &ModelConfig,
    layout: &VocabLayout,
    seed: u64,
    repetition: bool,
) -> Result<(Weights, PlantedGroundTruth)> {
    check_feasible(config, layout)?;
    let mut rng = crate::rng::named(seed, "planted");
    let (codes, c_max) = word_codes(layout.width, &mut rng);
    if c_max > MAX_COHERENCE {
        return Err(Error::Infeasible(format!(
            "word codes too coherent ({c_max:.3}) for width {} in {CODE_DIM} dimensions",
            layout.width
        )));
    }
    let slot = slots(config, seed, &mut rng);
    let d = config.d_model;
    let rho = B / (d as f64).sqrt();
    let dh = config.d_head();
    let mut p = Planter {
        w: Weights::zeros(config.clone()),
        rho,
        sqrt_dh: (dh as f64).sqrt(),
        dh,
    };

    // embeddings
    for t in 0..config.vocab_size {
        let row = p.w.tok_emb.row_mut(t);
        row[CONST] = B;
        let t = t as u32;
        if let Some((lang, i)) = layout.word(t) {
            row[LANG + lang.index()] = 1.0;
            row[CODE..CODE + CODE_DIM].copy_from_slice(&codes[i]);
        } else if t == NL {
            row[NLD] = 1.0;
        } else if t == SEP {
            row[SEPD] = 1.0;
        } else if let Some(lang) = Lang::ALL.into_iter().find(|l| l.tag() == t) {
            row[TAG] = 1.0;
            row[TAGLANG + lang.index()] = 1.0;
        }
    }
    for pos in 0..config.max_seq_len {
        let row = p.w.pos_emb.row_mut(pos);
        row[POS] = 0.01 * pos as f64;
        row[SINK] = if pos == 0 { 1.0 } else { 0.0 };
        row[OFF[0]] = pos as f64 + P0;
        row[OFF[1]] = pos as f64 + P0;
    }

    let lang_dims: Vec<(usize, f64)> = (0..3).map(|l| (LANG + l, 1.0)).collect();
    let mut used: Vec<Vec<bool>> = vec![vec![false; config.d_ff]; config.n_layers];

    for c in 0..2 {
        // layer 0: offset from the most recent separator
        p.q(0, c, 0, &[(CONST, 1.0)]);
        p.k(0, c, 0, &[(SEPD, 3000.0), (POS, 500.0)]);
        p.vo(0, c, 0, &[(OFF[c], 1.0)], OFF[c], -1.0);

        // one-hot offset via triangle bumps of shifted ramps
        for (j, r) in (-1..=N_HOT as i64).enumerate() {
            let n = c * (N_HOT + 2) + j;
            used[0][n] = true;
            p.up(0, n, &[(OFF[c], BUMP_SIGMA)], -BUMP_SIGMA * r as f64);
            for (k, coeff) in [(r + 1, 1.0), (r, -2.0), (r - 1, 1.0)] {
                if (0..N_HOT as i64).contains(&k) {
                    p.down(0, n, HOT[c] + k as usize, coeff / BUMP_SIGMA);
                }
            }
        }

        // layer 1: copy the source word one offset ahead
        let h = c;
        for r in 0..N_HOT - 1 {
            p.q(1, h, r, &[(HOT[c] + r, 100.0)]);
            p.k(1, h, r, &[(HOT[c] + r + 1, 1.0)]);
        }
        p.q(1, h, N_HOT - 1, &[(CONST, 1.0)]);
        p.k(1, h, N_HOT - 1, &[(POS, 500.0)]);
        p.q(1, h, N_HOT, &[(CONST, 25.0), (POS, 500.0)]);
        p.k(1, h, N_HOT, &[(SINK, 1.0)]);
        let mut r = 0;
        for j in 0..CODE_DIM {
            p.vo(1, h, r, &[(CODE + j, 1.0)], OUT_CODE + j, 1.0);
            r += 1;
        }
        for l in 0..3 {
            p.vo(1, h, r, &[(LANG + l, 1.0)], OUT_LANG + l, 1.0);
            r += 1;
        }
        p.vo(1, h, r, &[(NLD, 1.0)], OUT_NL, 1.0);

        // layer 1: does this content word translate the aligned source word
        let h = 2 + c;
        let (g_off, g_code, recency) = (100.0, 200.0, 3.0);
        let s_m = g_off + g_code * (1.0 + c_max) / 2.0 - recency * (11.0 + 6.0) / 2.0;
        let mut r = 0;
        for o in 1..N_HOT - 1 {
            p.q(1, h, r, &[(HOT[c] + o, g_off)]);
            p.k(1, h, r, &[(HOT[c] + o, 1.0)]);
            r += 1;
        }
        for j in 0..CODE_DIM {
            p.q(1, h, r, &[(CODE + j, g_code)]);
            p.k(1, h, r, &[(CODE + j, 1.0)]);
            r += 1;
        }
        for l in 0..3 {
            p.q(1, h, r, &[(LANG + l, -500.0)]);
            p.k(1, h, r, &[(LANG + l, 1.0)]);
            r += 1;
        }
        p.q(1, h, r, &[(CONST, 1.0)]);
        p.k(1, h, r, &[(POS, recency * 100.0)]);
        r += 1;
        p.q(1, h, r, &[(CONST, s_m), (POS, recency * 100.0)]);
        p.k(1, h, r, &[(SINK, 1.0)]);
        debug_assert!(r < dh);
        p.vo(1, h, 0, &lang_dims, EV[c], 1.0);

        // layer 2: tags average the evidence over every earlier content word
        let h = c;
        p.q(2, h, 0, &[(TAG, 40.0)]);
        p.k(2, h, 0, &lang_dims);
        p.q(2, h, 1, &[(CONST, 20.0)]);
        p.k(2, h, 1, &[(SINK, 1.0)]);
        p.vo(2, h, 0, &[(EV[c], 1.0)], TASK, 4.0);
    }

    // layer 2 FFN: soft step on the task evidence
    for (n, t, sign) in [(0, GATE_LO, 1.0), (1, GATE_HI, -1.0)] {
        used[2][n] = true;
        p.up(2, n, &[(TASK, GATE_SIGMA)], -GATE_SIGMA * t);
        p.down(2, n, GATE, sign / (GATE_SIGMA * (GATE_HI - GATE_LO)));
    }

    // layer 3: the task head reads the target tag once the gate is open
    let hc = slot.task_head;
    p.q(3, hc, 0, &[(CONST, 1.0)]);
    p.k(3, hc, 0, &[(GATE, 120.0), (TAG, -30.0), (POS, 500.0)]);
    for l in 0..3 {
        p.vo(3, hc, l, &[(TAGLANG + l, 1.0)], TLANG + l, 1.0);
    }

    let mut neurons = Vec::new();
    if repetition {
        // the newline detector: fires when both copy heads land on a newline
        let n = slot.repeat_neuron;
        used[1][n] = true;
        p.up(1, n, &[(OUT_NL, 20.0), (TAG, -40.0), (NLD, -40.0)], -10.0);
        p.down(1, n, RFLAG, 1.0 / 30.0);
        p.down(1, n, OUT_NL, -0.1);
        neurons.push(Coord::new(1, n));

        // remember that the line has ended
        p.q(2, 2, 0, &[(CONST, 1.0)]);
        p.k(2, 2, 0, &[(RFLAG, 3000.0), (SEPD, 3000.0), (POS, 500.0)]);
        p.vo(2, 2, 0, &[(RFLAG, 1.0)], RMODE, 1.0);

        // then keep copying the current token
        let hs = slot.repeat_head;
        p.q(3, hs, 0, &[(RMODE, 2000.0)]);
        p.k(3, hs, 0, &[(POS, 1.0)]);
        p.q(3, hs, 1, &[(CONST, 30.0)]);
        p.k(3, hs, 1, &[(SINK, 1.0)]);
        let mut r = 0;
        for j in 0..CODE_DIM {
            p.vo(3, hs, r, &[(CODE + j, 1.0)], OUT_CODE + j, 4.0);
            r += 1;
        }
        for l in 0..3 {
            p.vo(3, hs, r, &[(LANG + l, 1.0)], OUT_LANG + l, 4.0);
            r += 1;
        }
        p.vo(3, hs, r, &lang_dims, OUT_NL, -4.0);
    }

    // unembedding
    for t in 0..config.vocab_size {
        let tok = t as u32;
        let mut terms: Vec<(usize, f64)> = Vec::new();
        if let Some((lang, i)) = layout.word(tok) {
            terms.extend((0..CODE_DIM).map(|j| (OUT_CODE + j, 40.0 * codes[i][j])));
            terms.push((OUT_LANG + lang.index(), 8.0));
            terms.push((TLANG + lang.index(), 30.0));
        } else if tok == NL {
            terms.push((OUT_NL, 40.0));
        } else {
            terms.push((CONST, -50.0 / B));
        }
        for j in 0..N_NOISE {
            terms.push((NOISE + j, gaussian(&mut rng)));
        }
        let row = p.w.unembed.row_mut(t);
        for (dim, c) in terms {
            row[dim] = c * rho;
        }
    }

    // every free neuron is a small distractor writing only into the noise block
    let readable: Vec<usize> = (LANG..CODE + CODE_DIM).collect();
    for l in 0..config.n_layers.min(4) {
        for n in 0..config.d_ff {
            if used[l][n] {
                continue;
            }
            let terms: Vec<(usize, f64)> = readable
                .iter()
                .map(|&dim| (dim, 0.5 * gaussian(&mut rng)))
                .collect();
            let bias = 0.5 * gaussian(&mut rng);
            p.up(l, n, &terms, bias);
            for j in 0..N_NOISE {
                p.down(l, n, NOISE + j, 0.003 * gaussian(&mut rng));
            }
        }
    }

    let mut w = p.w;
    w.round_to_f32();
    w.validate()?;
    let truth = PlantedGroundTruth {
        contract: if repetition {
            REPETITION_CONTRACT
        } else {
            LANGUAGE_CONTRACT
        }
        .into(),
        seed,
        heads: vec![Coord::new(3, hc)],
        neurons,
        max_coherence: c_max,
    };
    Ok((w, truth))
}

/// A translation model whose only carrier of the target language is one
/// task head in the last layer. Without it the model copies the source.
pub fn plant_language_model(
    config: &ModelConfig,
    layout: &VocabLayout,
    seed: u64,
) -> Result<(Weights, PlantedGroundTruth)> {
    build(config, layout, seed, false)
}

/// The language model plus one neuron that, at the end of the translation,
/// suppresses the newline and switches the model into copying the last
/// token forever. Zeroing that neuron restores termination.
pub fn plant_repetition_model(
    config: &ModelConfig,
    layout: &VocabLayout,
    seed: u64,
) -> Result<(Weights, PlantedGroundTruth)> {
    build(config, layout, seed, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(50).unwrap()
    }

    #[test]
    fn truth_is_in_bounds_and_round_trips() {
        let l = layout();
        let cfg = planted_config(&l);
        for seed in [0, 5, 11] {
            let (w, t) = plant_repetition_model(&cfg, &l, seed).unwrap();
            assert_eq!(t.contract, REPETITION_CONTRACT);
            for c in &t.heads {
                assert!(c.layer < w.config.n_layers && c.index < w.config.n_heads);
            }
            for c in &t.neurons {
                assert!(c.layer < w.config.n_layers && c.index < w.config.d_ff);
            }
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("truth.json");
            t.save(&p).unwrap();
            assert_eq!(PlantedGroundTruth::load(&p).unwrap(), t);
        }
        let (_, t) = plant_language_model(&cfg, &l, 6).unwrap();
        assert_eq!(t.heads, vec![Coord::new(3, 2)]);
        assert!(t.neurons.is_empty());
    }

    #[test]
    fn same_seed_same_weights() {
        let l = layout();
        let cfg = planted_config(&l);
        assert_eq!(
            plant_language_model(&cfg, &l, 3).unwrap(),
            plant_language_model(&cfg, &l, 3).unwrap()
        );
        assert_ne!(
            plant_language_model(&cfg, &l, 3).unwrap().0,
            plant_language_model(&cfg, &l, 4).unwrap().0
        );
    }

    #[test]
    fn infeasible_configs_are_reported() {
        let l = layout();
        let small = ModelConfig::new(2, 2, 64, l.vocab_size(), 128);
        assert!(matches!(
            plant_language_model(&small, &l, 0),
            Err(Error::Infeasible(_))
        ));
        let permuted = VocabLayout::permuted(50, 1).unwrap();
        assert!(matches!(
            plant_repetition_model(&planted_config(&permuted), &permuted, 0),
            Err(Error::Infeasible(_))
        ));
        let mut narrow = planted_config(&l);
        narrow.vocab_size = 100;
        assert!(plant_language_model(&narrow, &l, 0).is_err());
    }

    #[test]
    fn offset_bumps_are_one_hot() {
        // planted weights read x / rho exactly enough that each offset
        // lights a single coordinate
        let l = layout();
        let (w, _) = plant_language_model(&planted_config(&l), &l, 0).unwrap();
        let tokens = crate::model::TokenSeq(vec![3, 2, 7, 8, 9, 1, 4, 2]);
        let spec = crate::model::InterventionSpec::none();
        let capture = crate::model::CaptureSpec::none();
        let mut cache = crate::model::KvCache::for_weights(&w);
        let st = crate::model::forward_chunk(
            &w,
            &mut cache,
            0,
            crate::model::embed(&w, &tokens, 0),
            0,
            &spec,
            &crate::model::ChunkOptions {
                ctx: crate::model::PositionContext {
                    prompt_len: tokens.len(),
                },
                capture: &capture,
                keep: false,
                record_layer_outputs: true,
                logits_from: None,
            },
        );
        let d = w.config.d_model;
        let expected = [0usize, 0, 1, 2, 3, 4, 5, 0];
        for (pos, &o) in expected.iter().enumerate() {
            let x = &st.layer_outputs[0][pos * d..(pos + 1) * d];
            for c in 0..2 {
                for k in 0..N_HOT {
                    let want = if k == o { 1.0 } else { 0.0 };
                    assert!(
                        (x[HOT[c] + k] - want).abs() < 1e-3,
                        "pos {pos} circuit {c} slot {k}: {}",
                        x[HOT[c] + k]
                    );
                }
            }
        }
    }
}
