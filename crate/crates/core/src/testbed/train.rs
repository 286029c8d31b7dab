// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training of small models on shot-formatted prompts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    render_prompt, sample_exemplars, DatasetSplits, PromptTemplate, SampleStrategy, NL, SEP,
};
use crate::error::{Error, Result};
use crate::model::tensor::softmax_in_place;
use crate::model::{
    backward_chunk, embed, forward_chunk, CaptureSpec, ChunkOptions, Gradients, InterventionSpec,
    KvCache, ModelConfig, PositionContext, TokenId, Weights,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam {
            config,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Relative weights of 0-, 1- and 5-shot formatting.
    pub shot_mix: [f64; 3],
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 8,
            steps: 300,
            seed: 0,
            shot_mix: [0.2, 0.4, 0.4],
            init_std: 0.02,
        }
    }
}

pub const SHOTS: [usize; 3] = [0, 1, 5];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.shot_mix.iter().any(|w| !(*w >= 0.0)) || self.shot_mix.iter().sum::<f64>() <= 0.0 {
            return bad("shot mixture weights must be non-negative and not all zero");
        }
        Ok(())
    }
}

/// One training sequence: tokens and which next-token predictions count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub tokens: Vec<TokenId>,
    /// `mask[i]` is true when the prediction made at position `i` is scored.
    pub mask: Vec<bool>,
}

/// Full prompt plus the query target and its newline; every target-line
/// token after the separator is scored, exemplar targets included.
fn sample(data: &DatasetSplits, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<TrainSample> {
    let settings: Vec<_> = data.settings.keys().copied().collect();
    let setting = settings[rng.gen_range(0..settings.len())];
    let s = data.splits(setting)?;
    let total: f64 = cfg.shot_mix.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut k = SHOTS[2];
    for (i, w) in cfg.shot_mix.iter().enumerate() {
        if u < *w {
            k = SHOTS[i];
            break;
        }
        u -= w;
    }
    let k = k.min(s.exps.len());
    let query = &s.train[rng.gen_range(0..s.train.len())];
    let ex = sample_exemplars(&s.exps, k, SampleStrategy::Uniform, rng)?;
    let p = render_prompt(&PromptTemplate::default(), &ex, query, k)?;
    let mut tokens = p.rendered.0;
    tokens.extend_from_slice(&query.tgt);
    tokens.push(NL);
    // target lines open with the target tag; its SEP predicts the first word
    let tgt_tag = setting.tgt.tag();
    let mut mask = vec![false; tokens.len()];
    let mut in_target = false;
    for i in 0..tokens.len() - 1 {
        let t = tokens[i];
        if t == NL {
            in_target = false;
            continue;
        }
        if i > 0 && t == SEP && tokens[i - 1] == tgt_tag {
            in_target = true;
        }
        mask[i] = in_target;
    }
    Ok(TrainSample { tokens, mask })
}

/// Mean cross-entropy over scored positions and its gradient.
pub fn loss_and_grad(w: &Weights, s: &TrainSample) -> Result<(f64, Gradients)> {
    let n_scored = s.mask.iter().filter(|&&m| m).count();
    if n_scored == 0 {
        return Err(Error::Empty("scored positions"));
    }
    let capture = CaptureSpec::none();
    let mut cache = KvCache::for_weights(w);
    let spec = InterventionSpec::none();
    let state = forward_chunk(
        w,
        &mut cache,
        0,
        embed(w, &s.tokens, 0),
        0,
        &spec,
        &ChunkOptions {
            ctx: PositionContext {
                prompt_len: s.tokens.len(),
            },
            capture: &capture,
            keep: true,
            record_layer_outputs: false,
            logits_from: Some(0),
        },
    );
    let scale = 1.0 / n_scored as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(s.tokens.len());
    for (i, logits) in state.logits.iter().enumerate() {
        let mut p = logits.clone();
        if s.mask[i] {
            softmax_in_place(&mut p);
            let target = s.tokens[i + 1] as usize;
            loss -= p[target].max(1e-300).ln() * scale;
            p.iter_mut().for_each(|x| *x *= scale);
            p[target] -= scale;
        } else {
            p.iter_mut().for_each(|x| *x = 0.0);
        }
        dlogits.push(p);
    }
    let out = backward_chunk(w, &cache, &state, &dlogits, true);
    let mut g = out.grads.expect("parameter gradients requested");
    g.add_embedding(&s.tokens, 0, &out.d_resid[0]);
    Ok((loss, g))
}

fn flatten(w: &Weights) -> Vec<f64> {
    let mut v = Vec::with_capacity(w.n_params());
    w.for_each_tensor(|_, d| v.extend_from_slice(d));
    v
}

fn unflatten(w: &mut Weights, v: &[f64]) {
    let mut i = 0;
    w.for_each_tensor_mut(|_, d| {
        let n = d.len();
        d.copy_from_slice(&v[i..i + n]);
        i += n;
    });
}

/// Trains from a seeded random initialisation and returns the weights and
/// the mean batch loss of every step.
pub fn train_toy_model_logged(
    config: &ModelConfig,
    data: &DatasetSplits,
    tc: &TrainConfig,
) -> Result<(Weights, Vec<f64>)> {
    tc.validate()?;
    config.validate()?;
    data.layout.check_fits(config.vocab_size)?;
    if data.settings.is_empty()
        || data
            .settings
            .values()
            .any(|s| s.train.is_empty() || s.exps.is_empty())
    {
        return Err(Error::Empty("training corpus"));
    }
    let mut init = crate::rng::named(tc.seed, "train-init");
    let mut w = Weights::random(config.clone(), tc.init_std, &mut init);
    let mut rng = crate::rng::named(tc.seed, "train-batches");
    let mut params = flatten(&w);
    let mut adam = Adam::new(tc.adam, params.len());
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut total = Gradients::zeros(config);
        let mut loss = 0.0;
        for _ in 0..tc.batch_size {
            let mut s = sample(data, tc, &mut rng)?;
            if s.tokens.len() > config.max_seq_len {
                s.tokens.truncate(config.max_seq_len);
                s.mask.truncate(config.max_seq_len);
                if let Some(m) = s.mask.last_mut() {
                    *m = false;
                }
            }
            let (l, g) = loss_and_grad(&w, &s)?;
            loss += l;
            total.add_assign(&g);
        }
        loss /= tc.batch_size as f64;
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        total.scale(1.0 / tc.batch_size as f64);
        adam.step(&mut params, &flatten(&total.0));
        unflatten(&mut w, &params);
        losses.push(loss);
    }
    w.round_to_f32();
    Ok((w, losses))
}

pub fn train_toy_model(
    config: &ModelConfig,
    data: &DatasetSplits,
    tc: &TrainConfig,
) -> Result<Weights> {
    train_toy_model_logged(config, data, tc).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn adam_first_steps_by_hand() {
        // f(x, y) = x^2 + 3y, from (1, -2)
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = Adam::new(cfg, 2);
        let mut p = vec![1.0, -2.0];
        adam.step(&mut p, &[2.0, 3.0]);
        // m = 0.1 g, v = 0.001 g^2, both bias-corrected back to g and g^2
        let expect0 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        let expect1 = -2.0 - 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-15 && (p[1] - expect1).abs() < 1e-15);

        let gx = 2.0 * p[0];
        adam.step(&mut p, &[gx, 3.0]);
        let m = 0.9 * 0.2 + 0.1 * gx;
        let v = 0.999 * 0.004 + 0.001 * gx * gx;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64 * 0.999);
        assert!((p[0] - (expect0 - 0.1 * mh / (vh.sqrt() + 1e-8))).abs() < 1e-14);
        // a constant gradient moves by exactly lr per step
        assert!((p[1] - (expect1 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    }

    fn tiny() -> (ModelConfig, DatasetSplits) {
        let mut cc = CorpusConfig::default().scaled(30);
        cc.width = 8;
        cc.max_len = 4;
        let data = generate_corpus(&cc).unwrap();
        let mut cfg = ModelConfig::new(1, 2, 16, data.layout.vocab_size(), 96);
        cfg.d_ff = 32;
        (cfg, data)
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            steps: 25,
            batch_size: 2,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let (a, la) = train_toy_model_logged(&cfg, &data, &tc).unwrap();
        let (b, lb) = train_toy_model_logged(&cfg, &data, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let head: f64 = la[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = la[la.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss {head} -> {tail}");
    }

    #[test]
    fn mask_covers_target_lines_only() {
        let (_, data) = tiny();
        let tc = TrainConfig {
            shot_mix: [0.0, 1.0, 0.0],
            ..TrainConfig::default()
        };
        let mut rng = crate::rng::named(1, "t");
        let s = sample(&data, &tc, &mut rng).unwrap();
        // one-shot: two target lines, each scoring |tgt| words plus NL
        let nl_count = s.tokens.iter().filter(|&&t| t == NL).count();
        assert_eq!(nl_count, 4);
        for (i, &m) in s.mask.iter().enumerate() {
            if m {
                let next = s.tokens[i + 1];
                assert!(next == NL || data.layout.language_of(next).is_some());
            }
        }
        assert!(!s.mask[s.tokens.len() - 1]);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (cfg, data) = tiny();
        let mut rng = crate::rng::named(5, "t");
        let w = Weights::random(cfg, 0.3, &mut rng);
        let s = sample(&data, &TrainConfig::default(), &mut rng).unwrap();
        let (_, g) = loss_and_grad(&w, &s).unwrap();
        let flat_g = flatten(&g.0);
        let base = flatten(&w);
        let h = 1e-5;
        for idx in (0..base.len()).step_by(base.len() / 37) {
            let mut wp = w.clone();
            let mut v = base.clone();
            v[idx] += h;
            unflatten(&mut wp, &v);
            let lp = loss_and_grad(&wp, &s).unwrap().0;
            v[idx] -= 2.0 * h;
            unflatten(&mut wp, &v);
            let lm = loss_and_grad(&wp, &s).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - flat_g[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "param {idx}: {fd} vs {}",
                flat_g[idx]
            );
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (cfg, data) = tiny();
        for tc in [
            TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam: AdamConfig {
                    lr: 0.0,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                train_toy_model(&cfg, &data, &tc),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}
