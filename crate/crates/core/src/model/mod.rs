// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small, fully instrumentable decoder-only transformer.
//!
//! The architecture is deliberately plain: learned absolute positions,
//! pre-norm RMSNorm, multi-head causal self-attention and an ungated GELU
//! feed-forward block. Every FFN intermediate scalar is a "neuron", and every
//! attention head's output-projected update to the residual stream is a
//! "head contribution". All arithmetic is `f64`.

mod backward;
mod forward;
mod generate;
mod intervention;
pub mod io;
mod score;
pub mod tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use backward::{backward_chunk, BackwardOutput, Gradients};
pub(crate) use forward::check_input;
pub use forward::{
    embed, forward, forward_chunk, forward_with_context, ActivationTrace, CaptureSpec,
    ChunkOptions, ChunkState, ForwardOutput, KvCache, PositionContext,
};
pub use generate::{argmax, generate, Generation};
pub use intervention::{Edit, InterventionSpec, PositionSelector};
pub use score::{
    neuron_gradient, objective_value, sequence_score, ClampProbe, Objective, ObjectiveKind,
    ScoreMode,
};
use tensor::{round_to_f32, Matrix};

pub type TokenId = u32;

/// An ordered list of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn concat(&self, other: &[TokenId]) -> TokenSeq {
        let mut v = self.0.clone();
        v.extend_from_slice(other);
        TokenSeq(v)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl AsRef<[TokenId]> for TokenSeq {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[default]
    RmsPreNorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positions {
    #[default]
    LearnedAbsolute,
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub positions: Positions,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Builds a config with `d_ff = 4 * d_model`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len,
            norm_eps: default_eps(),
            activation: Activation::Gelu,
            norm: Norm::RmsPreNorm,
            positions: Positions::LearnedAbsolute,
        }
    }

    /// The default toy scale: 4 layers, 4 heads, d_model 64, d_ff 256.
    pub fn toy(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig::new(4, 4, 64, vocab_size, max_seq_len)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn n_total_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive".into());
        }
        if !(self.norm_eps >= 0.0) {
            return bad("norm_eps must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-layer parameters. Projection matrices are stored `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `d_model x d_model`; columns `h*d_head..(h+1)*d_head` belong to head `h`.
    pub w_o: Matrix,
    pub ffn_norm: Vec<f64>,
    /// `d_ff x d_model`.
    pub w_up: Matrix,
    /// `d_model x d_ff`; column `n` is neuron `n`'s write direction.
    pub w_down: Matrix,
}

/// All model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub config: ModelConfig,
    /// `vocab_size x d_model`.
    pub tok_emb: Matrix,
    /// `max_seq_len x d_model`.
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `vocab_size x d_model`.
    pub unembed: Matrix,
}

impl Weights {
    /// All-zero weights with unit norm gains.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: vec![1.0; d],
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ffn_norm: vec![1.0; d],
            w_up: Matrix::zeros(config.d_ff, d),
            w_down: Matrix::zeros(d, config.d_ff),
        };
        Weights {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![1.0; d],
            unembed: Matrix::zeros(config.vocab_size, d),
            config,
        }
    }

    /// Gaussian initialisation with standard deviation `std`, norm gains 1,
    /// residual-writing projections scaled by `1/sqrt(2 n_layers)`.
    pub fn random(config: ModelConfig, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Weights::zeros(config);
        let resid_scale = 1.0 / (2.0 * w.config.n_layers as f64).sqrt();
        let mut fill = |m: &mut Matrix, s: f64| {
            for x in &mut m.data {
                *x = gaussian(rng) * s;
            }
        };
        fill(&mut w.tok_emb, std);
        fill(&mut w.pos_emb, std);
        fill(&mut w.unembed, std);
        for l in &mut w.layers {
            fill(&mut l.w_q, std);
            fill(&mut l.w_k, std);
            fill(&mut l.w_v, std);
            fill(&mut l.w_o, std * resid_scale);
            fill(&mut l.w_up, std);
            fill(&mut l.w_down, std * resid_scale);
        }
        w.round_to_f32();
        w
    }

    /// Round every parameter through `f32`.
    pub fn round_to_f32(&mut self) {
        self.for_each_tensor_mut(|_, v| round_to_f32(v));
    }

    /// Visits every tensor in canonical (file) order.
    pub fn for_each_tensor<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        f("tok_emb", &self.tok_emb.data);
        f("pos_emb", &self.pos_emb.data);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.attn_norm"), &l.attn_norm);
            f(&format!("layers.{i}.w_q"), &l.w_q.data);
            f(&format!("layers.{i}.w_k"), &l.w_k.data);
            f(&format!("layers.{i}.w_v"), &l.w_v.data);
            f(&format!("layers.{i}.w_o"), &l.w_o.data);
            f(&format!("layers.{i}.ffn_norm"), &l.ffn_norm);
            f(&format!("layers.{i}.w_up"), &l.w_up.data);
            f(&format!("layers.{i}.w_down"), &l.w_down.data);
        }
        f("final_norm", &self.final_norm);
        f("unembed", &self.unembed.data);
    }

    pub fn for_each_tensor_mut<F: FnMut(&str, &mut Vec<f64>)>(&mut self, mut f: F) {
        f("tok_emb", &mut self.tok_emb.data);
        f("pos_emb", &mut self.pos_emb.data);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.attn_norm"), &mut l.attn_norm);
            f(&format!("layers.{i}.w_q"), &mut l.w_q.data);
            f(&format!("layers.{i}.w_k"), &mut l.w_k.data);
            f(&format!("layers.{i}.w_v"), &mut l.w_v.data);
            f(&format!("layers.{i}.w_o"), &mut l.w_o.data);
            f(&format!("layers.{i}.ffn_norm"), &mut l.ffn_norm);
            f(&format!("layers.{i}.w_up"), &mut l.w_up.data);
            f(&format!("layers.{i}.w_down"), &mut l.w_down.data);
        }
        f("final_norm", &mut self.final_norm);
        f("unembed", &mut self.unembed.data);
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f, v, s) = (
            config.d_model,
            config.d_ff,
            config.vocab_size,
            config.max_seq_len,
        );
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![s, d]),
        ];
        for i in 0..config.n_layers {
            out.push((format!("layers.{i}.attn_norm"), vec![d]));
            for p in ["w_q", "w_k", "w_v", "w_o"] {
                out.push((format!("layers.{i}.{p}"), vec![d, d]));
            }
            out.push((format!("layers.{i}.ffn_norm"), vec![d]));
            out.push((format!("layers.{i}.w_up"), vec![f, d]));
            out.push((format!("layers.{i}.w_down"), vec![d, f]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![v, d]));
        out
    }

    /// Checks every tensor shape against the config and that all entries
    /// are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = Self::tensor_shapes(&self.config);
        let mut i = 0;
        let mut err = None;
        self.for_each_tensor(|name, data| {
            let expect: usize = shapes[i].1.iter().product();
            if err.is_none() {
                if data.len() != expect {
                    err = Some(Error::ShapeMismatch(format!(
                        "{name}: expected {expect} values, found {}",
                        data.len()
                    )));
                } else if data.iter().any(|x| !x.is_finite()) {
                    err = Some(Error::NonFinite(format!("weights tensor {name}")));
                }
            }
            i += 1;
        });
        if self.layers.len() != self.config.n_layers {
            return Err(Error::ShapeMismatch("layer count".into()));
        }
        err.map_or(Ok(()), Err)
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, d| n += d.len());
        n
    }
}

/// Standard normal sample (Box-Muller), kept local so streams stay stable.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_requires_divisible_heads() {
        let mut c = ModelConfig::new(2, 3, 8, 10, 16);
        assert!(c.validate().is_err());
        c.n_heads = 4;
        assert!(c.validate().is_ok());
        assert_eq!(c.d_ff, 32);
    }

    #[test]
    fn random_weights_are_f32_exact_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Weights::random(ModelConfig::new(2, 2, 8, 12, 16), 0.1, &mut rng);
        w.validate().unwrap();
        w.for_each_tensor(|_, d| assert!(d.iter().all(|&x| x as f32 as f64 == x)));
    }

    #[test]
    fn token_validation() {
        let t = TokenSeq::new(vec![0, 3, 9]);
        assert!(t.validate(10).is_ok());
        assert!(matches!(
            t.validate(9),
            Err(Error::TokenOutOfRange { id: 9, .. })
        ));
    }
}
