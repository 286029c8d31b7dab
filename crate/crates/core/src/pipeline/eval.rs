// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generation-based evaluation of editing plans.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    render_prompt, sample_exemplars, DatasetSplits, PromptInstance, PromptTemplate, SampleStrategy,
    Setting, NL,
};
use crate::detect::{
    compute_error_metrics, corpus_bleu, four_way_split, relative_change, EvalCase,
    FourWaySplitReport,
};
use crate::edit::{
    default_mtv_layer, plan_mtv, plan_mtv_i_d, plan_random_heads, EditPlan, Strategy,
};
use crate::error::{Error, Result};
use crate::locate::{extract_function_vector, Coord, LocatedComponents, MeanHeadOutputs};
use crate::model::{generate, InterventionSpec, TokenSeq, Weights};

/// Exemplar count used to render evaluation prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shot {
    Zero,
    One,
    Five,
}

impl Shot {
    pub fn k(self) -> usize {
        match self {
            Shot::Zero => 0,
            Shot::One => 1,
            Shot::Five => 5,
        }
    }
}

/// Rendered test prompts for one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub setting: Setting,
    pub shot: Shot,
    pub prompts: Vec<PromptInstance>,
}

/// The first `n` test pairs of `setting`, with exemplars drawn from the
/// exemplar split on a per-setting stream.
pub fn build_eval_set(
    data: &DatasetSplits,
    setting: Setting,
    shot: Shot,
    n: usize,
    seed: u64,
) -> Result<EvalSet> {
    let s = data.splits(setting)?;
    if s.test.is_empty() || n == 0 {
        return Err(Error::Empty("evaluation cases"));
    }
    let mut rng = crate::rng::named(seed, &format!("eval-exemplars/{setting}"));
    let template = PromptTemplate::default();
    let prompts = s.test[..n.min(s.test.len())]
        .iter()
        .map(|q| {
            let ex = sample_exemplars(&s.exps, shot.k(), SampleStrategy::Uniform, &mut rng)?;
            render_prompt(&template, &ex, q, shot.k())
        })
        .collect::<Result<_>>()?;
    Ok(EvalSet {
        setting,
        shot,
        prompts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_cases: usize,
    pub lmr: f64,
    pub rr: f64,
    pub bleu: f64,
    pub four_way: FourWaySplitReport,
    pub generations: Vec<TokenSeq>,
}

/// Percentage changes from baseline to edited; `None` where the baseline is 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeChanges {
    pub lmr: Option<f64>,
    pub rr: Option<f64>,
    pub bleu: Option<f64>,
}

impl RelativeChanges {
    pub fn between(base: &RunMetrics, edited: &RunMetrics) -> Self {
        RelativeChanges {
            lmr: relative_change(base.lmr, edited.lmr).ok(),
            rr: relative_change(base.rr, edited.rr).ok(),
            bleu: relative_change(base.bleu, edited.bleu).ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingEval {
    pub setting: Setting,
    pub shot: Shot,
    pub baseline: RunMetrics,
    pub edited: RunMetrics,
    pub relative: RelativeChanges,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub components: Vec<Coord>,
    pub settings: Vec<SettingEval>,
    pub provenance: ReportProvenance,
}

/// Greedy generations for every prompt, capped by the positional table.
pub fn run_generations(
    w: &Weights,
    set: &EvalSet,
    spec: &InterventionSpec,
    max_new_tokens: usize,
) -> Result<Vec<(TokenSeq, bool)>> {
    set.prompts
        .iter()
        .map(|p| {
            let room = w.config.max_seq_len.saturating_sub(p.rendered.len());
            if room == 0 {
                return Err(Error::SequenceTooLong {
                    len: p.rendered.len(),
                    max: w.config.max_seq_len,
                });
            }
            let g = generate(w, &p.rendered, max_new_tokens.min(room), spec, NL)?;
            Ok((g.tokens, g.hit_max))
        })
        .collect()
}

/// Error ratios, BLEU and the four-way split of a set of generations.
pub fn score_generations(
    data: &DatasetSplits,
    set: &EvalSet,
    gens: Vec<(TokenSeq, bool)>,
) -> Result<RunMetrics> {
    let cases: Vec<EvalCase> = gens
        .iter()
        .map(|(g, hit)| EvalCase {
            generation: g.clone(),
            target_lang: set.setting.tgt,
            hit_max: *hit,
        })
        .collect();
    let m = compute_error_metrics(&cases, &data.layout)?;
    let hyps: Vec<TokenSeq> = gens.into_iter().map(|g| g.0).collect();
    let refs: Vec<TokenSeq> = set.prompts.iter().map(|p| p.query.tgt.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?.bleu;
    let four_way = four_way_split(&hyps, &refs, &m.mismatch, &m.repeated)?;
    Ok(RunMetrics {
        n_cases: cases.len(),
        lmr: m.lmr,
        rr: m.rr,
        bleu,
        four_way,
        generations: hyps,
    })
}

/// Runs the Empty plan and `plan` on the same prompts.
pub fn evaluate_setting(
    w: &Weights,
    data: &DatasetSplits,
    plan: &EditPlan,
    set: &EvalSet,
    max_new_tokens: usize,
) -> Result<SettingEval> {
    plan.validate(&w.config)?;
    let baseline = score_generations(
        data,
        set,
        run_generations(w, set, &InterventionSpec::none(), max_new_tokens)?,
    )?;
    let edited = if plan.spec.is_empty() {
        baseline.clone()
    } else {
        score_generations(
            data,
            set,
            run_generations(w, set, &plan.spec, max_new_tokens)?,
        )?
    };
    Ok(SettingEval {
        setting: set.setting,
        shot: set.shot,
        relative: RelativeChanges::between(&baseline, &edited),
        baseline,
        edited,
    })
}

/// Evaluates one plan on every set. Plans whose vector depends on the
/// setting go through [`transfer_eval`] instead.
pub fn evaluate_plan(
    w: &Weights,
    data: &DatasetSplits,
    plan: &EditPlan,
    sets: &[EvalSet],
    max_new_tokens: usize,
) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::Empty("evaluation sets"));
    }
    Ok(EvalReport {
        strategy: plan.strategy,
        components: plan.components.clone(),
        settings: sets
            .iter()
            .map(|s| evaluate_setting(w, data, plan, s, max_new_tokens))
            .collect::<Result<_>>()?,
        provenance: ReportProvenance::default(),
    })
}

/// Builds the vector plan of `strategy` for `heads` with the vector taken
/// from `means` (the target direction's own prompts).
pub fn vector_plan(
    w: &Weights,
    strategy: Strategy,
    heads: &LocatedComponents,
    means: &MeanHeadOutputs,
    setting: Setting,
    layer: Option<usize>,
) -> Result<EditPlan> {
    let fv = extract_function_vector(means, heads, setting)?;
    let layer = layer.unwrap_or_else(|| default_mtv_layer(w.config.n_layers));
    match strategy {
        Strategy::Mtv | Strategy::MtvI | Strategy::RandomHeads => {
            plan_mtv(&fv, layer, &w.config, strategy)
        }
        Strategy::MtvID => plan_mtv_i_d(&fv, heads, &w.config, strategy),
        s => Err(Error::InvalidArgument(format!(
            "{s} is not a vector strategy"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub setting: Setting,
    pub located: SettingEval,
    pub random: SettingEval,
    pub random_heads: Vec<Coord>,
    /// `baseline - edited` language mismatch ratio for each arm.
    pub lmr_reduction_located: f64,
    pub lmr_reduction_random: f64,
    pub bleu_gain_located: f64,
    pub bleu_gain_random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source: Setting,
    pub strategy: Strategy,
    pub heads: Vec<Coord>,
    pub pairs: Vec<TransferPair>,
}

/// Heads located on `source` applied to every set, each with its own
/// direction's vector, next to an equally sized random head set that
/// avoids the located heads.
#[allow(clippy::too_many_arguments)]
pub fn transfer_eval(
    w: &Weights,
    data: &DatasetSplits,
    source: Setting,
    heads: &LocatedComponents,
    means: &std::collections::BTreeMap<Setting, MeanHeadOutputs>,
    sets: &[EvalSet],
    strategy: Strategy,
    layer: Option<usize>,
    random_seed: u64,
    max_new_tokens: usize,
) -> Result<TransferReport> {
    if heads.is_empty() {
        return Err(Error::Empty("located heads"));
    }
    let random = plan_random_heads(heads.len(), random_seed, &w.config, &heads.items)?;
    let random_strategy = if strategy == Strategy::MtvID {
        Strategy::MtvID
    } else {
        Strategy::RandomHeads
    };
    let mut pairs = Vec::new();
    for set in sets {
        let m = means.get(&set.setting).ok_or_else(|| {
            Error::InvalidArgument(format!("no mean head outputs for {}", set.setting))
        })?;
        let located = evaluate_setting(
            w,
            data,
            &vector_plan(w, strategy, heads, m, set.setting, layer)?,
            set,
            max_new_tokens,
        )?;
        let mut rplan = vector_plan(w, random_strategy, &random, m, set.setting, layer)?;
        rplan.strategy = Strategy::RandomHeads;
        let rand_eval = evaluate_setting(w, data, &rplan, set, max_new_tokens)?;
        pairs.push(TransferPair {
            setting: set.setting,
            lmr_reduction_located: located.baseline.lmr - located.edited.lmr,
            lmr_reduction_random: rand_eval.baseline.lmr - rand_eval.edited.lmr,
            bleu_gain_located: located.edited.bleu - located.baseline.bleu,
            bleu_gain_random: rand_eval.edited.bleu - rand_eval.baseline.bleu,
            located,
            random: rand_eval,
            random_heads: random.items.clone(),
        });
    }
    Ok(TransferReport {
        source,
        strategy,
        heads: heads.items.clone(),
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub tokens: usize,
    pub cases: usize,
    pub seconds: f64,
    pub per_token_ms: f64,
    pub per_case_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub strategy: Strategy,
    pub baseline: Timing,
    pub edited: Timing,
    /// Median over paired sweeps of edited over baseline per-token time.
    pub per_token_ratio: f64,
    pub per_case_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timing(tokens: usize, cases: usize, seconds: f64) -> Timing {
    Timing {
        tokens,
        cases,
        seconds,
        per_token_ms: 1e3 * seconds / tokens.max(1) as f64,
        per_case_ms: 1e3 * seconds / cases.max(1) as f64,
    }
}

/// Wall-clock cost of generating with `plan` against the Empty plan on
/// the same prompts. The two arms alternate; each timing keeps its fastest
/// of `repeats` sweeps, and the ratios are medians over adjacent pairs so
/// that machine-wide slowdowns cancel.
pub fn bench_overhead(
    w: &Weights,
    plan: &EditPlan,
    prompts: &[TokenSeq],
    max_new_tokens: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if prompts.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "bench needs at least 10 cases, got {}",
            prompts.len()
        )));
    }
    plan.validate(&w.config)?;
    let none = InterventionSpec::none();
    let sweep = |spec: &InterventionSpec| -> Result<(usize, f64)> {
        let t0 = Instant::now();
        let mut tokens = 0;
        for p in prompts {
            let room = w.config.max_seq_len.saturating_sub(p.len()).max(1);
            tokens += generate(w, p, max_new_tokens.min(room), spec, u32::MAX)?
                .tokens
                .len();
        }
        Ok((tokens, t0.elapsed().as_secs_f64()))
    };
    let (mut base, mut edit) = ((0, f64::INFINITY), (0, f64::INFINITY));
    let (mut tok_ratios, mut case_ratios) = (Vec::new(), Vec::new());
    for _ in 0..repeats.max(1) {
        let b = sweep(&none)?;
        let e = sweep(&plan.spec)?;
        let (tb, te) = (
            timing(b.0, prompts.len(), b.1),
            timing(e.0, prompts.len(), e.1),
        );
        tok_ratios.push(te.per_token_ms / tb.per_token_ms);
        case_ratios.push(te.per_case_ms / tb.per_case_ms);
        if b.1 < base.1 {
            base = b;
        }
        if e.1 < edit.1 {
            edit = e;
        }
    }
    let baseline = timing(base.0, prompts.len(), base.1);
    let edited = timing(edit.0, prompts.len(), edit.1);
    Ok(BenchReport {
        strategy: plan.strategy,
        per_token_ratio: median(tok_ratios),
        per_case_ratio: median(case_ratios),
        baseline,
        edited,
    })
}
