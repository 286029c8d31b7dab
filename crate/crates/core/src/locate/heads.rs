// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean head outputs, causal mediation over heads, function vectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::suffix::SuffixRunner;
use super::{top_k, ComponentKind, Coord, LocatedComponents, Provenance};
use crate::corpus::{PromptInstance, Setting};
use crate::error::{Error, Result};
use crate::model::{
    forward, CaptureSpec, Edit, InterventionSpec, Objective, PositionSelector, ScoreMode, TokenSeq,
    Weights,
};

/// Mean residual-space contribution of every head at the last prompt token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanHeadOutputs {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub prompt_count: usize,
    /// `[layer][head][d_model]`, flattened.
    pub values: Vec<f64>,
}

impl MeanHeadOutputs {
    pub fn get(&self, layer: usize, head: usize) -> &[f64] {
        let o = (layer * self.n_heads + head) * self.d_model;
        &self.values[o..o + self.d_model]
    }
}

/// Captured contributions at the last position of `tokens`, `[layer][head][d]`.
pub(crate) fn last_token_heads(w: &Weights, tokens: &TokenSeq) -> Result<Vec<f64>> {
    let out = forward(
        w,
        tokens,
        &InterventionSpec::none(),
        &CaptureSpec::heads_at(PositionSelector::LastPromptToken),
    )?;
    let cfg = &w.config;
    let mut v = Vec::with_capacity(cfg.n_total_heads() * cfg.d_model);
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            v.extend_from_slice(out.trace.head(l, h, 0));
        }
    }
    Ok(v)
}

pub fn mean_head_outputs(w: &Weights, prompts: &[PromptInstance]) -> Result<MeanHeadOutputs> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    let per: Vec<Vec<f64>> = prompts
        .par_iter()
        .map(|p| last_token_heads(w, &p.rendered))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; per[0].len()];
    for v in &per {
        for (a, b) in values.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = prompts.len() as f64;
    values.iter_mut().for_each(|x| *x /= n);
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mean head output".into()));
    }
    Ok(MeanHeadOutputs {
        n_layers: w.config.n_layers,
        n_heads: w.config.n_heads,
        d_model: w.config.d_model,
        prompt_count: prompts.len(),
        values,
    })
}

/// Average indirect effect per head, `[layer][head]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AieMap {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f64>,
    /// Per-pair CIE vectors in the same layout, when retained.
    pub cie: Option<Vec<Vec<f64>>>,
    pub mode: ScoreMode,
}

impl AieMap {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    /// Rows are layers, columns heads.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for h in 0..self.n_heads {
            s.push_str(&format!(",head{h}"));
        }
        s.push('\n');
        for l in 0..self.n_layers {
            s.push_str(&l.to_string());
            for h in 0..self.n_heads {
                s.push_str(&format!(",{}", self.get(l, h)));
            }
            s.push('\n');
        }
        s
    }
}

pub(crate) fn target_objective(p: &PromptInstance, mode: ScoreMode) -> Objective {
    let target = match mode {
        ScoreMode::FirstTokenProb => TokenSeq(vec![p.query.tgt[0]]),
        ScoreMode::MeanLogProb => p.query.tgt.clone(),
    };
    Objective::new(target, mode.into())
}

fn pair_cie(
    w: &Weights,
    shuffled: &PromptInstance,
    means: &MeanHeadOutputs,
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    let obj = target_objective(shuffled, mode);
    let prompt = &shuffled.rendered;
    let mut runner = SuffixRunner::new(w, prompt, &obj, prompt.len() - 1)?;
    let base = obj.score_logits(&runner.base_logits);
    let mut out = Vec::with_capacity(w.config.n_total_heads());
    for layer in 0..w.config.n_layers {
        for head in 0..w.config.n_heads {
            let spec = InterventionSpec::single(Edit::ReplaceHeadContribution {
                layer,
                head,
                selector: PositionSelector::LastPromptToken,
                vector: means.get(layer, head).to_vec(),
            });
            let s = obj.score_logits(&runner.run(layer, &spec));
            out.push(s - base);
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("indirect effect".into()));
    }
    Ok(out)
}

/// Patches each head's clean mean into every shuffled run at the last
/// prompt token and averages the score change.
pub fn causal_aie(
    w: &Weights,
    prompts: &[PromptInstance],
    shuffled: &[PromptInstance],
    means: &MeanHeadOutputs,
    mode: ScoreMode,
    parallel: bool,
) -> Result<AieMap> {
    if prompts.len() != shuffled.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prompts paired with {} shuffled prompts",
            prompts.len(),
            shuffled.len()
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    if let Some(i) = (0..prompts.len()).find(|&i| prompts[i].query != shuffled[i].query) {
        return Err(Error::InvalidArgument(format!(
            "pair {i} has different queries"
        )));
    }
    if means.n_layers != w.config.n_layers
        || means.n_heads != w.config.n_heads
        || means.d_model != w.config.d_model
    {
        return Err(Error::ShapeMismatch(
            "mean head outputs do not match the model".into(),
        ));
    }
    let cies: Vec<Vec<f64>> = if parallel {
        shuffled
            .par_iter()
            .map(|s| pair_cie(w, s, means, mode))
            .collect::<Result<_>>()?
    } else {
        shuffled
            .iter()
            .map(|s| pair_cie(w, s, means, mode))
            .collect::<Result<_>>()?
    };
    let mut values = vec![0.0; w.config.n_total_heads()];
    for c in &cies {
        for (a, b) in values.iter_mut().zip(c) {
            *a += b;
        }
    }
    let n = cies.len() as f64;
    values.iter_mut().for_each(|x| *x /= n);
    Ok(AieMap {
        n_layers: w.config.n_layers,
        n_heads: w.config.n_heads,
        values,
        cie: Some(cies),
        mode,
    })
}

pub fn select_top_heads(aie: &AieMap, k: usize) -> Result<LocatedComponents> {
    top_k(
        ComponentKind::Head,
        &aie.values,
        aie.n_heads,
        k,
        Provenance {
            settings: Vec::new(),
            selection: format!("top-{k} by AIE"),
            seed: None,
        },
    )
}

/// Sum of the mean contributions of a head set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionVector {
    pub setting: Setting,
    pub heads: Vec<Coord>,
    pub vector: Vec<f64>,
    pub prompt_count: usize,
}

pub fn extract_function_vector(
    means: &MeanHeadOutputs,
    heads: &LocatedComponents,
    setting: Setting,
) -> Result<FunctionVector> {
    if heads.is_empty() {
        return Err(Error::Empty("head set"));
    }
    let mut v = vec![0.0; means.d_model];
    for c in &heads.items {
        if c.layer >= means.n_layers || c.index >= means.n_heads {
            return Err(Error::OutOfBounds(format!("head {c:?}")));
        }
        for (a, b) in v.iter_mut().zip(means.get(c.layer, c.index)) {
            *a += b;
        }
    }
    Ok(FunctionVector {
        setting,
        heads: heads.items.clone(),
        vector: v,
        prompt_count: means.prompt_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        generate_corpus, make_shuffled, render_prompt, CorpusConfig, PromptTemplate,
        TranslationPair,
    };
    use crate::model::{sequence_score, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Weights, Vec<PromptInstance>, Vec<TranslationPair>) {
        let cfg = CorpusConfig {
            settings: vec![Setting::ALL[0]],
            ..CorpusConfig::default()
        }
        .scaled(12);
        let data = generate_corpus(&cfg).unwrap();
        let sp = data.splits(Setting::ALL[0]).unwrap();
        let t = PromptTemplate::default();
        let prompts = (0..3)
            .map(|i| render_prompt(&t, &sp.exps[i * 2..i * 2 + 2], &sp.test[i], 2).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Weights::random(
            ModelConfig::new(2, 2, 8, data.layout.vocab_size(), 64),
            0.5,
            &mut rng,
        );
        (w, prompts, sp.exps.clone())
    }

    #[test]
    fn self_patch_is_zero() {
        let (w, prompts, _) = fixture();
        let one = &prompts[..1];
        let means = mean_head_outputs(&w, one).unwrap();
        let aie = causal_aie(&w, one, one, &means, ScoreMode::FirstTokenProb, false).unwrap();
        assert!(aie.values.iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn aie_matches_independent_forwards() {
        let (w, prompts, pool) = fixture();
        let shuffled: Vec<_> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| make_shuffled(p, &pool, i as u64).unwrap())
            .collect();
        let means = mean_head_outputs(&w, &prompts).unwrap();
        for mode in [ScoreMode::FirstTokenProb, ScoreMode::MeanLogProb] {
            let aie = causal_aie(&w, &prompts, &shuffled, &means, mode, true).unwrap();
            assert_eq!(
                aie,
                causal_aie(&w, &prompts, &shuffled, &means, mode, false).unwrap()
            );
            for (l, h) in [(0, 1), (1, 0)] {
                let mut sum = 0.0;
                for s in &shuffled {
                    let spec = InterventionSpec::single(Edit::ReplaceHeadContribution {
                        layer: l,
                        head: h,
                        selector: PositionSelector::LastPromptToken,
                        vector: means.get(l, h).to_vec(),
                    });
                    let obj = target_objective(s, mode);
                    let a = sequence_score(&w, &s.rendered, &obj.target, mode, &spec).unwrap();
                    let b = sequence_score(
                        &w,
                        &s.rendered,
                        &obj.target,
                        mode,
                        &InterventionSpec::none(),
                    )
                    .unwrap();
                    sum += a - b;
                }
                assert!((aie.get(l, h) - sum / 3.0).abs() < 1e-12);
            }
        }
        assert!(causal_aie(
            &w,
            &prompts,
            &shuffled[..2],
            &means,
            ScoreMode::FirstTokenProb,
            false
        )
        .is_err());
    }

    #[test]
    fn function_vector_matches_direct_sum() {
        let (w, prompts, _) = fixture();
        let means = mean_head_outputs(&w, &prompts).unwrap();
        let scored = |cs: &[(usize, usize)]| {
            LocatedComponents::from_scored(
                ComponentKind::Head,
                cs.iter()
                    .enumerate()
                    .map(|(i, &(l, h))| (Coord::new(l, h), i as f64))
                    .collect(),
                Provenance::default(),
            )
            .unwrap()
        };
        let s = Setting::ALL[0];
        let h1 = scored(&[(0, 0), (1, 1)]);
        let h2 = scored(&[(0, 1)]);
        let all = scored(&[(0, 0), (1, 1), (0, 1)]);
        let v1 = extract_function_vector(&means, &h1, s).unwrap().vector;
        let v2 = extract_function_vector(&means, &h2, s).unwrap().vector;
        let v = extract_function_vector(&means, &all, s).unwrap().vector;
        for i in 0..v.len() {
            assert!((v[i] - v1[i] - v2[i]).abs() < 1e-12);
        }
        // per-prompt sums over the head set, then the mean
        let d = w.config.d_model;
        let mut direct = vec![0.0; d];
        for p in &prompts {
            let caps = last_token_heads(&w, &p.rendered).unwrap();
            for c in &all.items {
                let o = (c.layer * w.config.n_heads + c.index) * d;
                for k in 0..d {
                    direct[k] += caps[o + k] / prompts.len() as f64;
                }
            }
        }
        for k in 0..d {
            assert!((direct[k] - v[k]).abs() < 1e-9);
        }
        assert!(extract_function_vector(&means, &scored(&[(5, 0)]), s).is_err());
    }

    #[test]
    fn top_heads_order_and_range() {
        let aie = AieMap {
            n_layers: 2,
            n_heads: 2,
            values: vec![0.1, 0.4, 0.4, -1.0],
            cie: None,
            mode: ScoreMode::FirstTokenProb,
        };
        let top = select_top_heads(&aie, 3).unwrap();
        assert_eq!(
            top.items,
            vec![Coord::new(0, 1), Coord::new(1, 0), Coord::new(0, 0)]
        );
        assert!(select_top_heads(&aie, 5).is_err());
        assert!(aie.to_csv().starts_with("layer,head0,head1\n0,0.1,0.4\n"));
    }
}
