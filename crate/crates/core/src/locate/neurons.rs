// SPDX-License-Identifier: MIT OR Apache-2.0

//! Integrated-gradient attribution over FFN neurons.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{top_k, ComponentKind, Coord, LocatedComponents, NeuronCoord, Provenance};
use crate::corpus::PromptInstance;
use crate::detect::RepetitionVerdict;
use crate::error::{Error, Result};
use crate::model::{
    ClampProbe, InterventionSpec, Objective, ObjectiveKind, TokenId, TokenSeq, Weights,
};
use crate::rng;

/// `p(t | inp+)` where `inp+` is the prompt plus a prefix of the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringCase {
    pub inp_plus: TokenSeq,
    pub t: TokenId,
    pub split: usize,
}

impl ScoringCase {
    pub fn probe_case(&self) -> AttributionCase {
        AttributionCase {
            prompt: self.inp_plus.clone(),
            objective: Objective::new(TokenSeq(vec![self.t]), ObjectiveKind::FirstTokenProb),
            positions: vec![self.inp_plus.len() - 1],
        }
    }
}

/// Splits the query target at `split`: the left part joins the prompt and
/// the token at `split` is scored.
pub fn scoring_case(prompt: &PromptInstance, split: usize) -> Result<ScoringCase> {
    let tgt = &prompt.query.tgt;
    if split >= tgt.len() {
        return Err(Error::OutOfBounds(format!(
            "split {split} of a {}-token target",
            tgt.len()
        )));
    }
    Ok(ScoringCase {
        inp_plus: prompt.rendered.concat(&tgt[..split]),
        t: tgt[split],
        split,
    })
}

/// Segments of one looping generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionScoringCase {
    /// `inp ++ y_norm ++ y_repe`.
    pub inp_repe: TokenSeq,
    pub y_repe: TokenSeq,
    /// `inp ++ y_norm`.
    pub compare: TokenSeq,
}

impl RepetitionScoringCase {
    fn case(prompt: &TokenSeq, y_repe: &TokenSeq) -> AttributionCase {
        let p = prompt.len();
        AttributionCase {
            prompt: prompt.clone(),
            objective: Objective::new(y_repe.clone(), ObjectiveKind::MeanLogProb),
            positions: (p - 1..p - 1 + y_repe.len()).collect(),
        }
    }

    /// Scores another copy of the unit after it has already appeared.
    pub fn repetition(&self) -> AttributionCase {
        Self::case(&self.inp_repe, &self.y_repe)
    }

    /// Scores the unit's first appearance.
    pub fn comparison(&self) -> AttributionCase {
        Self::case(&self.compare, &self.y_repe)
    }
}

pub fn repetition_case(
    inp: &TokenSeq,
    verdict: &RepetitionVerdict,
) -> Result<RepetitionScoringCase> {
    if !verdict.flagged || verdict.y_repe.is_empty() {
        return Err(Error::InvalidArgument(
            "verdict is not a flagged repetition".into(),
        ));
    }
    if inp.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let compare = inp.concat(&verdict.y_norm);
    Ok(RepetitionScoringCase {
        inp_repe: compare.concat(&verdict.y_repe),
        y_repe: verdict.y_repe.clone(),
        compare,
    })
}

/// An objective with the clamp positions used for attribution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionCase {
    pub prompt: TokenSeq,
    pub objective: Objective,
    /// Absolute positions in `prompt ++ target[..T-1]`.
    pub positions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributionVariant {
    Mt,
    Repetition,
    Comparison,
}

/// Mean attribution per neuron, indexed `layer * d_ff + neuron`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub variant: AttributionVariant,
    pub n_layers: usize,
    pub d_ff: usize,
    pub scores: Vec<f64>,
    pub count: usize,
}

impl AttributionScores {
    pub fn get(&self, c: NeuronCoord) -> f64 {
        self.scores[c.layer * self.d_ff + c.index]
    }

    pub fn top(&self, k: usize, seed: Option<u64>) -> Result<LocatedComponents> {
        top_k(
            ComponentKind::Neuron,
            &self.scores,
            self.d_ff,
            k,
            Provenance {
                settings: Vec::new(),
                selection: format!("top-{k} by {:?} attribution", self.variant),
                seed,
            },
        )
    }
}

/// Right-endpoint Riemann sum of the path integral, every clamp position
/// scaled by the same factor.
pub fn ig_from_probe(probe: &mut ClampProbe<'_>, neuron: usize, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let nat = probe.natural(neuron);
    if nat.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut vals = vec![0.0; nat.len()];
    for k in 1..=steps {
        let a = k as f64 / steps as f64;
        for (v, n) in vals.iter_mut().zip(&nat) {
            *v = a * n;
        }
        let (_, g) = probe.eval(neuron, &vals)?;
        sum += nat.iter().zip(&g).map(|(n, g)| n * g).sum::<f64>();
    }
    let attr = sum / steps as f64;
    if !attr.is_finite() {
        return Err(Error::NonFinite("attribution".into()));
    }
    Ok(attr)
}

pub fn ig_attribution(
    w: &Weights,
    case: &AttributionCase,
    neuron: NeuronCoord,
    steps: usize,
) -> Result<f64> {
    if neuron.index >= w.config.d_ff {
        return Err(Error::OutOfBounds(format!("neuron {}", neuron.index)));
    }
    let none = InterventionSpec::none();
    let mut probe = ClampProbe::new(
        w,
        &case.prompt,
        &case.objective,
        &none,
        neuron.layer,
        &case.positions,
    )?;
    ig_from_probe(&mut probe, neuron.index, steps)
}

/// All neurons' attributions for one case, `layer * d_ff + neuron`.
fn case_attributions(w: &Weights, case: &AttributionCase, steps: usize) -> Result<Vec<f64>> {
    let none = InterventionSpec::none();
    let mut out = Vec::with_capacity(w.config.n_total_neurons());
    for layer in 0..w.config.n_layers {
        let mut probe = ClampProbe::new(
            w,
            &case.prompt,
            &case.objective,
            &none,
            layer,
            &case.positions,
        )?;
        for n in 0..w.config.d_ff {
            out.push(ig_from_probe(&mut probe, n, steps)?);
        }
    }
    Ok(out)
}

/// Mean attribution over cases. Per-case vectors are summed in case order,
/// so the result does not depend on `parallel`.
pub fn attribution_scores(
    w: &Weights,
    cases: &[AttributionCase],
    variant: AttributionVariant,
    steps: usize,
    parallel: bool,
) -> Result<AttributionScores> {
    if cases.is_empty() {
        return Err(Error::Empty("case list"));
    }
    let per: Vec<Vec<f64>> = if parallel {
        cases
            .par_iter()
            .map(|c| case_attributions(w, c, steps))
            .collect::<Result<_>>()?
    } else {
        cases
            .iter()
            .map(|c| case_attributions(w, c, steps))
            .collect::<Result<_>>()?
    };
    let mut scores = vec![0.0; w.config.n_total_neurons()];
    for v in &per {
        for (a, b) in scores.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = cases.len() as f64;
    scores.iter_mut().for_each(|x| *x /= n);
    Ok(AttributionScores {
        variant,
        n_layers: w.config.n_layers,
        d_ff: w.config.d_ff,
        scores,
        count: cases.len(),
    })
}

/// Draws a uniform split per prompt and ranks neurons by mean attribution
/// to the next target token.
pub fn locate_mt_neurons(
    w: &Weights,
    prompts: &[PromptInstance],
    n_cases: usize,
    top: usize,
    seed: u64,
    steps: usize,
) -> Result<(AttributionScores, LocatedComponents)> {
    if prompts.is_empty() || n_cases == 0 {
        return Err(Error::Empty("case list"));
    }
    let mut r = rng::named(seed, "mt-split");
    let cases = prompts[..n_cases.min(prompts.len())]
        .iter()
        .map(|p| {
            if p.query.tgt.is_empty() {
                return Err(Error::Empty("query target"));
            }
            let split = r.gen_range(0..p.query.tgt.len());
            Ok(scoring_case(p, split)?.probe_case())
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = attribution_scores(w, &cases, AttributionVariant::Mt, steps, true)?;
    let located = scores.top(top, Some(seed))?;
    Ok((scores, located))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionLocating {
    pub repetition: AttributionScores,
    pub comparison: AttributionScores,
    pub n_repe: LocatedComponents,
    pub n_compare: LocatedComponents,
    pub selected: LocatedComponents,
}

/// Neurons that matter for continuing a loop but not for producing the
/// unit the first time.
pub fn locate_repetition_neurons(
    w: &Weights,
    cases: &[RepetitionScoringCase],
    pool: usize,
    top: usize,
    steps: usize,
) -> Result<RepetitionLocating> {
    if cases.is_empty() {
        return Err(Error::NoRepetitionCases);
    }
    let pool = pool.min(w.config.n_total_neurons());
    let repe: Vec<_> = cases.iter().map(|c| c.repetition()).collect();
    let comp: Vec<_> = cases.iter().map(|c| c.comparison()).collect();
    let repetition = attribution_scores(w, &repe, AttributionVariant::Repetition, steps, true)?;
    let comparison = attribution_scores(w, &comp, AttributionVariant::Comparison, steps, true)?;
    let n_repe = repetition.top(pool, None)?;
    let n_compare = comparison.top(pool, None)?;
    let scored: Vec<(Coord, f64)> = n_repe
        .items
        .iter()
        .zip(&n_repe.scores)
        .filter(|(c, _)| !n_compare.contains(c))
        .map(|(c, s)| (*c, *s))
        .collect();
    let selected = LocatedComponents::from_scored(
        ComponentKind::Neuron,
        scored,
        Provenance {
            settings: Vec::new(),
            selection: format!("top-{top} of top-{pool} repetition minus top-{pool} comparison"),
            seed: None,
        },
    )?
    .truncated(top);
    Ok(RepetitionLocating {
        repetition,
        comparison,
        n_repe,
        n_compare,
        selected,
    })
}
