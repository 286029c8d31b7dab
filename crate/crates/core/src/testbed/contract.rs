// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioural checks that a planted model does what it promises.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PlantedGroundTruth;
use crate::corpus::{
    render_prompt, sample_exemplars, DatasetSplits, Lang, PromptTemplate, SampleStrategy, Setting,
    NL,
};
use crate::detect::{compute_error_metrics, EvalCase};
use crate::error::{Error, Result};
use crate::locate::Coord;
use crate::model::{
    generate, sequence_score, Edit, InterventionSpec, PositionSelector, ScoreMode, TokenSeq,
    Weights,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageContractReport {
    pub n_cases: usize,
    pub one_shot_exact: f64,
    pub zero_shot_lmr: f64,
    /// One-shot language mismatch with the planted heads zeroed.
    pub ablated_lmr: f64,
    /// Mean drop in first-target-token probability when a planted head is zeroed.
    pub planted_effect: f64,
    /// Largest such drop over every other head.
    pub max_other_effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionContractReport {
    pub n_cases: usize,
    pub rr: f64,
    pub rr_erased: f64,
    pub exact_erased: f64,
}

/// Directions whose target is not the pivot language.
pub fn non_pivot_settings(data: &DatasetSplits) -> Vec<Setting> {
    data.settings
        .keys()
        .copied()
        .filter(|s| s.tgt != Lang::E)
        .collect()
}

/// `n` prompts with `k` exemplars, spread over the non-pivot directions.
pub fn contract_prompts(
    data: &DatasetSplits,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<(TokenSeq, TokenSeq, Lang)>> {
    let settings = non_pivot_settings(data);
    if settings.is_empty() {
        return Err(Error::Corpus("no direction with a non-pivot target".into()));
    }
    let mut rng = crate::rng::named(seed, "contract-prompts");
    let template = PromptTemplate::default();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let setting = settings[i % settings.len()];
        let s = data.splits(setting)?;
        let q = &s.test[rng.gen_range(0..s.test.len())];
        let ex = sample_exemplars(&s.exps, k, SampleStrategy::Uniform, &mut rng)?;
        let p = render_prompt(&template, &ex, q, k)?;
        out.push((p.rendered, q.tgt.clone(), setting.tgt));
    }
    Ok(out)
}

fn zero_heads(w: &Weights, heads: &[Coord]) -> InterventionSpec {
    let mut spec = InterventionSpec::none();
    for h in heads {
        spec.push(Edit::ReplaceHeadContribution {
            layer: h.layer,
            head: h.index,
            selector: PositionSelector::AllPositions,
            vector: vec![0.0; w.config.d_model],
        });
    }
    spec
}

fn erase_neurons(truth: &PlantedGroundTruth) -> InterventionSpec {
    let mut spec = InterventionSpec::none();
    for n in &truth.neurons {
        spec.push(Edit::ClampNeuron {
            layer: n.layer,
            neuron: n.index,
            selector: PositionSelector::AllPositions,
            value: 0.0,
        });
    }
    spec
}

fn run(
    w: &Weights,
    prompts: &[(TokenSeq, TokenSeq, Lang)],
    spec: &InterventionSpec,
    max_new: Option<usize>,
) -> Result<(Vec<EvalCase>, f64)> {
    let mut cases = Vec::with_capacity(prompts.len());
    let mut exact = 0;
    for (p, tgt, lang) in prompts {
        let budget = max_new
            .unwrap_or(2 * tgt.len() + 4)
            .min(w.config.max_seq_len - p.len());
        let g = generate(w, p, budget, spec, NL)?;
        if g.tokens == *tgt {
            exact += 1;
        }
        cases.push(EvalCase {
            generation: g.tokens,
            target_lang: *lang,
            hit_max: g.hit_max,
        });
    }
    Ok((cases, exact as f64 / prompts.len().max(1) as f64))
}

/// Mean drop in `p(target[0])` from zeroing each head on its own.
pub fn head_ablation_effects(
    w: &Weights,
    prompts: &[(TokenSeq, TokenSeq, Lang)],
) -> Result<Vec<(Coord, f64)>> {
    let none = InterventionSpec::none();
    let base: Vec<f64> = prompts
        .iter()
        .map(|(p, t, _)| {
            sequence_score(
                w,
                p,
                &TokenSeq(vec![t[0]]),
                ScoreMode::FirstTokenProb,
                &none,
            )
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for layer in 0..w.config.n_layers {
        for head in 0..w.config.n_heads {
            let c = Coord::new(layer, head);
            let spec = zero_heads(w, &[c]);
            let mut total = 0.0;
            for ((p, t, _), b) in prompts.iter().zip(&base) {
                total += b - sequence_score(
                    w,
                    p,
                    &TokenSeq(vec![t[0]]),
                    ScoreMode::FirstTokenProb,
                    &spec,
                )?;
            }
            out.push((c, total / prompts.len().max(1) as f64));
        }
    }
    Ok(out)
}

pub fn check_language_contract(
    w: &Weights,
    truth: &PlantedGroundTruth,
    data: &DatasetSplits,
    n_cases: usize,
    seed: u64,
) -> Result<LanguageContractReport> {
    let one = contract_prompts(data, 1, n_cases, seed)?;
    let zero = contract_prompts(data, 0, n_cases, seed)?;
    let (_, one_shot_exact) = run(w, &one, &InterventionSpec::none(), None)?;
    let (zc, _) = run(w, &zero, &InterventionSpec::none(), None)?;
    let (ac, _) = run(w, &one, &zero_heads(w, &truth.heads), None)?;
    let effects = head_ablation_effects(w, &one)?;
    let mut planted_effect = f64::NEG_INFINITY;
    let mut max_other_effect = f64::NEG_INFINITY;
    for (c, e) in effects {
        if truth.heads.contains(&c) {
            planted_effect = planted_effect.max(e);
        } else {
            max_other_effect = max_other_effect.max(e);
        }
    }
    Ok(LanguageContractReport {
        n_cases,
        planted_effect,
        max_other_effect,
        one_shot_exact,
        zero_shot_lmr: compute_error_metrics(&zc, &data.layout)?.lmr,
        ablated_lmr: compute_error_metrics(&ac, &data.layout)?.lmr,
    })
}

pub fn check_repetition_contract(
    w: &Weights,
    truth: &PlantedGroundTruth,
    data: &DatasetSplits,
    n_cases: usize,
    max_new: usize,
    seed: u64,
) -> Result<RepetitionContractReport> {
    let one = contract_prompts(data, 1, n_cases, seed)?;
    let (base, _) = run(w, &one, &InterventionSpec::none(), Some(max_new))?;
    let (erased, exact_erased) = run(w, &one, &erase_neurons(truth), Some(max_new))?;
    Ok(RepetitionContractReport {
        n_cases,
        rr: compute_error_metrics(&base, &data.layout)?.rr,
        rr_erased: compute_error_metrics(&erased, &data.layout)?.rr,
        exact_erased,
    })
}
