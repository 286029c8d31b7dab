// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Each criterion prints one PASS/FAIL line to stderr;
//! criterion 14 is reported but does not fail the run.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use mtlab::corpus::{
    generate_corpus, make_shuffled, render_prompt, sample_exemplars, CorpusConfig, DatasetSplits,
    PromptInstance, PromptTemplate, SampleStrategy, Setting, NL,
};
use mtlab::detect::{corpus_bleu, detect_repetition, relative_change};
use mtlab::edit::{
    plan_mtv, plan_mtv_i_d, plan_neuron_edit, plan_random_heads, EditPlan, NeuronEditMode, Strategy,
};
use mtlab::locate::{
    causal_aie, ig_attribution, intersect_components, locate_repetition_neurons, mean_head_outputs,
    repetition_case, select_top_heads, AttributionCase, ComponentKind, Coord, FunctionVector,
    LocatedComponents, Provenance,
};
use mtlab::model::{
    forward, generate, neuron_gradient, objective_value, CaptureSpec, Edit, InterventionSpec,
    ModelConfig, Objective, ObjectiveKind, PositionSelector, ScoreMode, TokenSeq, Weights,
};
use mtlab::pipeline::{
    bench_overhead, build_eval_set, evaluate_plan, evaluate_setting, transfer_eval, vector_plan,
    RunConfig, Shot,
};
use mtlab::testbed::{
    plant_language_model, plant_repetition_model, planted_config, train_toy_model,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn corpus() -> DatasetSplits {
    generate_corpus(&CorpusConfig::default().scaled(100)).unwrap()
}

/// `n` train-split queries of `setting`, each with `k` exemplars.
fn k_shot(
    data: &DatasetSplits,
    setting: Setting,
    k: usize,
    n: usize,
    seed: u64,
) -> Vec<PromptInstance> {
    let s = data.splits(setting).unwrap();
    let mut rng = mtlab::rng::named(seed, "acceptance-prompts");
    s.train[..n]
        .iter()
        .map(|q| {
            render_prompt(
                &PromptTemplate::default(),
                &sample_exemplars(&s.exps, k, SampleStrategy::Uniform, &mut rng).unwrap(),
                q,
                k,
            )
            .unwrap()
        })
        .collect()
}

fn heads(items: &[Coord]) -> LocatedComponents {
    let scored = items
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, (items.len() - i) as f64))
        .collect();
    LocatedComponents::from_scored(ComponentKind::Head, scored, Provenance::default()).unwrap()
}

fn neurons(items: &[Coord]) -> LocatedComponents {
    let scored = items
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, (items.len() - i) as f64))
        .collect();
    LocatedComponents::from_scored(ComponentKind::Neuron, scored, Provenance::default()).unwrap()
}

/// A random toy model and an attribution case on it.
// small and sharp: stresses the backward pass
fn sharp_model() -> (ModelConfig, f64) {
    (ModelConfig::new(2, 2, 16, 24, 32), 0.5)
}

// the toy architecture at the trainer's initialisation scale
fn toy_model() -> (ModelConfig, f64) {
    let vocab = CorpusConfig::default().layout().unwrap().vocab_size();
    (
        ModelConfig::toy(vocab, 64),
        mtlab::testbed::TrainConfig::default().init_std,
    )
}

fn random_triple(
    rng: &mut ChaCha8Rng,
    (config, std): (ModelConfig, f64),
) -> (Weights, AttributionCase, Coord) {
    let v = config.vocab_size as u32;
    let w = Weights::random(
        config,
        std,
        &mut mtlab::rng::named(rng.gen(), "acceptance-model"),
    );
    let p_len = rng.gen_range(2..8);
    let prompt = TokenSeq((0..p_len).map(|_| rng.gen_range(0..v)).collect());
    let (kind, t_len) = if rng.gen_bool(0.5) {
        (ObjectiveKind::FirstTokenProb, 1)
    } else {
        (ObjectiveKind::MeanLogProb, rng.gen_range(1..4))
    };
    let target = TokenSeq((0..t_len).map(|_| rng.gen_range(0..v)).collect());
    let positions = (p_len - 1..p_len - 1 + t_len).collect();
    let c = Coord::new(
        rng.gen_range(0..w.config.n_layers),
        rng.gen_range(0..w.config.d_ff),
    );
    (
        w,
        AttributionCase {
            prompt,
            objective: Objective::new(target, kind),
            positions,
        },
        c,
    )
}

fn clamped(w: &Weights, case: &AttributionCase, c: Coord, value: f64) -> f64 {
    let spec = InterventionSpec::single(Edit::ClampNeuron {
        layer: c.layer,
        neuron: c.index,
        selector: PositionSelector::explicit(case.positions.iter().copied()),
        value,
    });
    objective_value(w, &case.prompt, &case.objective, &spec).unwrap()
}

fn c1_ig_completeness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = mtlab::rng::named(1, "criterion-1");
    let (mut worst_full, mut worst_coarse) = (0.0f64, 0.0f64);
    let mut fails = 0;
    for _ in 0..100 {
        let (w, case, c) = random_triple(&mut rng, toy_model());
        let delta = objective_value(&w, &case.prompt, &case.objective, &InterventionSpec::none())
            .unwrap()
            - clamped(&w, &case, c, 0.0);
        let fine = ig_attribution(&w, &case, c, 2000).unwrap();
        let coarse = ig_attribution(&w, &case, c, 20).unwrap();
        let e1 = (fine - delta).abs() / (0.01 * delta.abs() + 1e-6);
        let e2 = (coarse - fine).abs() / (0.05 * fine.abs() + 1e-6);
        worst_full = worst_full.max(e1);
        worst_coarse = worst_coarse.max(e2);
        if e1 > 1.0 || e2 > 1.0 {
            fails += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        fails == 0 && secs < 120.0,
        format!("{fails}/100 outside tolerance, worst error/tolerance {worst_full:.3} (2000 steps) {worst_coarse:.3} (20 steps), {secs:.1}s"),
    )
}

fn c2_gradient_oracle() -> Outcome {
    let mut rng = mtlab::rng::named(2, "criterion-2");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (w, case, c) = random_triple(&mut rng, sharp_model());
        let sel = PositionSelector::explicit(case.positions.iter().copied());
        let v = rng.gen_range(-1.0..1.0);
        let g = neuron_gradient(
            &w,
            &case.prompt,
            &case.objective,
            c.layer,
            c.index,
            v,
            &sel,
            &InterventionSpec::none(),
        )
        .unwrap();
        let h = 1e-3;
        let fd = (clamped(&w, &case, c, v + h) - clamped(&w, &case, c, v - h)) / (2.0 * h);
        worst = worst.max((g - fd).abs() / fd.abs().max(1e-8));
    }
    outcome(worst <= 1e-4, format!("worst relative error {worst:.2e}"))
}

fn c3_self_patch(data: &DatasetSplits) -> Outcome {
    let mut cfg = ModelConfig::toy(data.layout.vocab_size(), 512);
    cfg.d_ff = 256;
    let toy = Weights::random(cfg, 0.05, &mut mtlab::rng::named(3, "criterion-3"));
    let (planted, _) =
        plant_language_model(&planted_config(&data.layout), &data.layout, 3).unwrap();
    let mut worst = 0.0f64;
    for w in [&toy, &planted] {
        for (i, s) in Setting::ALL.into_iter().enumerate() {
            let p = k_shot(data, s, 3, 2, i as u64);
            for one in p.chunks(1) {
                let means = mean_head_outputs(w, one).unwrap();
                for mode in [ScoreMode::FirstTokenProb, ScoreMode::MeanLogProb] {
                    let aie = causal_aie(w, one, one, &means, mode, false).unwrap();
                    worst = aie.values.iter().fold(worst, |m, v| m.max(v.abs()));
                }
            }
        }
    }
    outcome(worst <= 1e-9, format!("max |CIE| {worst:.2e}"))
}

fn c4_null_edits(data: &DatasetSplits) -> Outcome {
    let (w, truth) = plant_language_model(&planted_config(&data.layout), &data.layout, 4).unwrap();
    let d = w.config.d_model;
    let zero_fv = FunctionVector {
        setting: Setting::ALL[0],
        heads: truth.heads.clone(),
        vector: vec![0.0; d],
        prompt_count: 1,
    };
    let mut residual = InterventionSpec::none();
    for layer in 0..w.config.n_layers {
        residual.push(Edit::AddToResidual {
            layer,
            selector: PositionSelector::AllPositions,
            vector: vec![0.0; d],
        });
    }
    let some_neurons = neurons(&[Coord::new(0, 3), Coord::new(1, 40), Coord::new(3, 7)]);
    let plans = [
        ("Empty", EditPlan::empty()),
        (
            "Amplify(1.0)",
            plan_neuron_edit(
                &some_neurons,
                NeuronEditMode::Amplify(1.0),
                &w.config,
                Strategy::MtNeurons,
            )
            .unwrap(),
        ),
        (
            "MTV(0)",
            plan_mtv(&zero_fv, 2, &w.config, Strategy::Mtv).unwrap(),
        ),
        (
            "AddToResidual(0)",
            EditPlan {
                strategy: Strategy::Mtv,
                spec: residual,
                components: Vec::new(),
                vector: None,
            },
        ),
    ];
    let sets: Vec<_> = Setting::ALL
        .into_iter()
        .map(|s| build_eval_set(data, s, Shot::One, 5, 4).unwrap())
        .collect();
    let mut worst = 0.0f64;
    let mut same_metrics = true;
    for (_, plan) in &plans {
        for set in &sets {
            for p in &set.prompts {
                let a = forward(
                    &w,
                    &p.rendered,
                    &InterventionSpec::none(),
                    &CaptureSpec::none(),
                )
                .unwrap()
                .logits;
                let b = forward(&w, &p.rendered, &plan.spec, &CaptureSpec::none())
                    .unwrap()
                    .logits;
                worst = a
                    .iter()
                    .flatten()
                    .zip(b.iter().flatten())
                    .fold(worst, |m, (x, y)| m.max((x - y).abs()));
            }
            let e = evaluate_setting(&w, data, plan, set, 20).unwrap();
            same_metrics &= e.baseline == e.edited;
        }
    }
    outcome(
        worst <= 1e-12 && same_metrics,
        format!(
            "{} plans, max logit diff {worst:.2e}, identical metrics {same_metrics}",
            plans.len()
        ),
    )
}

fn c5_head_recovery(data: &DatasetSplits) -> Outcome {
    let config = planted_config(&data.layout);
    let mut bad = Vec::new();
    let mut min_margin = f64::INFINITY;
    for seed in 0..10u64 {
        let (w, truth) = plant_language_model(&config, &data.layout, seed).unwrap();
        let setting = Setting::ALL[seed as usize % 4];
        let prompts = k_shot(data, setting, 10, 8, seed);
        let pool = &data.splits(setting).unwrap().exps;
        let shuffled: Vec<_> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| make_shuffled(p, pool, seed * 100 + i as u64).unwrap())
            .collect();
        let means = mean_head_outputs(&w, &prompts).unwrap();
        let aie = causal_aie(
            &w,
            &prompts,
            &shuffled,
            &means,
            ScoreMode::FirstTokenProb,
            true,
        )
        .unwrap();
        let ranked = select_top_heads(&aie, w.config.n_total_heads()).unwrap();
        let (top, runner) = (ranked.scores[0], ranked.scores[1]);
        let margin = if runner > 0.0 {
            top / runner
        } else {
            f64::INFINITY
        };
        min_margin = min_margin.min(margin);
        let k1 = select_top_heads(&aie, 1).unwrap();
        if ranked.items[0] != truth.heads[0]
            || top <= 0.0
            || margin < 5.0
            || k1.items != truth.heads
        {
            bad.push(seed);
        }
    }
    outcome(
        bad.is_empty(),
        format!("failing seeds {bad:?}, smallest margin {min_margin:.1}x"),
    )
}

fn lmr_with(
    w: &Weights,
    data: &DatasetSplits,
    spec: &InterventionSpec,
    sets: &[mtlab::pipeline::EvalSet],
) -> f64 {
    let plan = EditPlan {
        strategy: Strategy::Mtv,
        spec: spec.clone(),
        components: Vec::new(),
        vector: None,
    };
    let r = evaluate_plan(w, data, &plan, sets, 20).unwrap();
    let n: usize = r.settings.iter().map(|s| s.edited.n_cases).sum();
    r.settings
        .iter()
        .map(|s| s.edited.lmr * s.edited.n_cases as f64)
        .sum::<f64>()
        / n as f64
}

fn c6_language_round_trip(data: &DatasetSplits) -> Outcome {
    let (w, truth) = plant_language_model(&planted_config(&data.layout), &data.layout, 6).unwrap();
    let c = truth.heads[0];
    let d = w.config.d_model;
    let ablate = Edit::ReplaceHeadContribution {
        layer: c.layer,
        head: c.index,
        selector: PositionSelector::AllPositions,
        vector: vec![0.0; d],
    };
    let (mut ablated, mut restored) = (Vec::new(), Vec::new());
    for s in Setting::ALL {
        let set = build_eval_set(data, s, Shot::Zero, 25, 6).unwrap();
        let means = mean_head_outputs(&w, &k_shot(data, s, 10, 10, 6)).unwrap();
        let mut spec = InterventionSpec::single(ablate.clone());
        ablated.push(lmr_with(&w, data, &spec, std::slice::from_ref(&set)));
        spec.push(Edit::AddToHeadContribution {
            layer: c.layer,
            head: c.index,
            selector: PositionSelector::GeneratedPositions,
            vector: means.get(c.layer, c.index).to_vec(),
        });
        restored.push(lmr_with(&w, data, &spec, &[set]));
    }
    let a = ablated.iter().sum::<f64>() / 4.0;
    let r = restored.iter().sum::<f64>() / 4.0;
    outcome(
        a >= 0.9 && r <= 0.1,
        format!("100 zero-shot prompts: ablated LMR {a:.3}, restored LMR {r:.3}"),
    )
}

fn c7_repetition(data: &DatasetSplits) -> Outcome {
    let (w, truth) =
        plant_repetition_model(&planted_config(&data.layout), &data.layout, 7).unwrap();
    let target = truth.neurons[0];
    let sets: Vec<_> = Setting::ALL
        .into_iter()
        .map(|s| build_eval_set(data, s, Shot::One, 25, 7).unwrap())
        .collect();
    // the first few looping generations, in evaluation order
    let mut cases = Vec::new();
    for p in sets.iter().flat_map(|s| &s.prompts) {
        let g = generate(&w, &p.rendered, 150, &InterventionSpec::none(), NL).unwrap();
        let v = detect_repetition(&g.tokens, g.hit_max);
        if v.flagged && cases.len() < 4 {
            cases.push(repetition_case(&p.rendered, &v).unwrap());
        }
    }
    let r = locate_repetition_neurons(&w, &cases, 300, truth.neurons.len(), 8).unwrap();
    let (in_repe, in_comp, sel) = (
        r.n_repe.contains(&target),
        r.n_compare.contains(&target),
        r.selected.contains(&target),
    );
    let plan = plan_neuron_edit(
        &r.selected,
        NeuronEditMode::Erase,
        &w.config,
        Strategy::RpNeurons,
    )
    .unwrap();
    let evals: Vec<_> = sets
        .iter()
        .map(|s| evaluate_setting(&w, data, &plan, s, 150).unwrap())
        .collect();
    let rr_base = evals.iter().map(|e| e.baseline.rr).sum::<f64>() / 4.0;
    let rr_edit = evals.iter().map(|e| e.edited.rr).sum::<f64>() / 4.0;
    let bleu_up = evals.iter().all(|e| e.edited.bleu > e.baseline.bleu);
    outcome(
        in_repe && !in_comp && sel && rr_base == 1.0 && rr_edit == 0.0 && bleu_up,
        format!(
            "in N_repe {in_repe}, in N_compare {in_comp}, selected {sel}; RR {rr_base:.2} -> {rr_edit:.2} on 100 prompts; BLEU up in every setting {bleu_up}"
        ),
    )
}

/// Shortest period, then earliest start, whose tail is a whole power of the unit.
fn brute_period(y: &[u32]) -> Option<(usize, usize)> {
    let n = y.len();
    for q in 1..=n / 2 {
        for s in 0..n {
            let tail = &y[s..];
            if tail.len() >= 2 * q && tail.len() % q == 0 && tail.chunks(q).all(|c| c == &tail[..q])
            {
                return Some((q, s));
            }
        }
    }
    None
}

fn c8_repetition_oracle() -> Outcome {
    let mut rng = mtlab::rng::named(8, "criterion-8");
    let mut disagreements = 0;
    for i in 0..1000 {
        let y: Vec<u32> = if i % 2 == 0 {
            (0..rng.gen_range(0..=64))
                .map(|_| rng.gen_range(0..4))
                .collect()
        } else {
            // prefix, several copies of a unit, sometimes a corrupted tail
            let mut v: Vec<u32> = (0..rng.gen_range(0..10))
                .map(|_| rng.gen_range(0..3))
                .collect();
            let unit: Vec<u32> = (0..rng.gen_range(1..6))
                .map(|_| rng.gen_range(0..3))
                .collect();
            for _ in 0..rng.gen_range(1..14) {
                v.extend_from_slice(&unit);
            }
            if rng.gen_bool(0.3) {
                let j = rng.gen_range(0..v.len());
                v[j] = (v[j] + 1) % 3;
            }
            if rng.gen_bool(0.2) {
                v.push(rng.gen_range(0..3));
            }
            v.truncate(64);
            v
        };
        let v = detect_repetition(&y, true);
        let agree = match brute_period(&y) {
            None => !v.flagged,
            Some((q, s)) => {
                v.flagged
                    && v.y_repe.len() == q
                    && v.y_repe[..] == y[y.len() - q..]
                    && v.y_norm.len() == s
                    && v.onset == s + q
            }
        };
        if !agree || detect_repetition(&y, false).flagged {
            disagreements += 1;
        }
    }
    outcome(
        disagreements == 0,
        format!("{disagreements} disagreements on 1000 strings"),
    )
}

fn c9_bleu() -> Outcome {
    let a = corpus_bleu(&[vec![1u32, 2, 3, 4]], &[vec![1u32, 2, 3, 4, 5]])
        .unwrap()
        .bleu;
    let refs: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![4, 5, 6, 7, 8], vec![9]];
    let b = corpus_bleu(&refs, &refs).unwrap().bleu;
    outcome(
        (a - 77.880).abs() <= 0.01 && b == 100.0,
        format!("hand case {a:.4}, identical corpora {b}"),
    )
}

fn c10_intersection_fixture() -> Outcome {
    let head_pairs = [
        [9, 25],
        [12, 28],
        [13, 7],
        [11, 18],
        [12, 15],
        [14, 14],
        [11, 2],
        [15, 10],
        [14, 5],
        [10, 31],
        [12, 20],
        [16, 1],
    ];
    let neuron_pairs = [[6642, 15], [1648, 10], [4531, 8], [5077, 16], [1392, 7]];
    // listed as [index, layer]
    let heads_g: Vec<Coord> = head_pairs.iter().map(|p| Coord::new(p[1], p[0])).collect();
    let neurons_g: Vec<Coord> = neuron_pairs
        .iter()
        .map(|p| Coord::new(p[1], p[0]))
        .collect();
    let mut rng = mtlab::rng::named(10, "criterion-10");
    let mut check =
        |kind: ComponentKind, planted: &[Coord], pre_top: usize, grid: (usize, usize)| -> bool {
            let mut map = BTreeMap::new();
            for (si, s) in Setting::ALL.into_iter().enumerate() {
                let mut scored: Vec<(Coord, f64)> = planted
                    .iter()
                    .map(|c| (*c, rng.gen_range(0.0..1.0)))
                    .collect();
                // fillers come from a per-setting slice of the grid, so they never coincide
                let mut j = si * pre_top;
                while scored.len() < pre_top {
                    let c = Coord::new(j / grid.1, j % grid.1);
                    if !planted.contains(&c) {
                        scored.push((c, rng.gen_range(0.0..1.0)));
                    }
                    j += 1;
                }
                map.insert(
                    s,
                    LocatedComponents::from_scored(kind, scored, Provenance::default()).unwrap(),
                );
            }
            let mut out = intersect_components(&map, pre_top, planted.len())
                .unwrap()
                .items;
            let mut want = planted.to_vec();
            out.sort();
            want.sort();
            out == want
        };
    let h = check(ComponentKind::Head, &heads_g, 100, (32, 32));
    let n = check(ComponentKind::Neuron, &neurons_g, 300, (32, 11008));
    outcome(
        h && n,
        format!("12 heads recovered {h}, 5 neurons recovered {n}"),
    )
}

fn c11_relative_change() -> Outcome {
    let r = relative_change(0.0486, 0.013203).unwrap();
    outcome(
        (r + 72.84).abs() <= 0.01,
        format!("relative change {r:.4}%"),
    )
}

fn c12_transfer(data: &DatasetSplits) -> Outcome {
    let config = planted_config(&data.layout);
    let source = Setting::ALL[0];
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in [0u64, 5, 11] {
        let (w, _) = plant_language_model(&config, &data.layout, seed).unwrap();
        let prompts = k_shot(data, source, 10, 8, seed);
        let pool = &data.splits(source).unwrap().exps;
        let shuffled: Vec<_> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| make_shuffled(p, pool, i as u64).unwrap())
            .collect();
        let src_means = mean_head_outputs(&w, &prompts).unwrap();
        let located = select_top_heads(
            &causal_aie(
                &w,
                &prompts,
                &shuffled,
                &src_means,
                ScoreMode::FirstTokenProb,
                true,
            )
            .unwrap(),
            1,
        )
        .unwrap();
        let mut means = BTreeMap::new();
        let mut sets = Vec::new();
        for s in Setting::ALL {
            means.insert(
                s,
                mean_head_outputs(&w, &k_shot(data, s, 10, 10, seed)).unwrap(),
            );
            sets.push(build_eval_set(data, s, Shot::Zero, 20, seed).unwrap());
        }
        let r = transfer_eval(
            &w,
            data,
            source,
            &located,
            &means,
            &sets,
            Strategy::Mtv,
            None,
            seed,
            20,
        )
        .unwrap();
        for p in &r.pairs {
            pass &= p.lmr_reduction_located > p.lmr_reduction_random
                && p.random_heads.len() == located.len();
        }
        let worst = r
            .pairs
            .iter()
            .map(|p| p.lmr_reduction_located - p.lmr_reduction_random)
            .fold(f64::INFINITY, f64::min);
        lines.push(format!("seed {seed} min gap {worst:.2}"));
    }
    outcome(
        pass,
        format!("located minus random LMR reduction: {}", lines.join(", ")),
    )
}

fn c13_overhead(data: &DatasetSplits) -> Outcome {
    let (w, truth) = plant_language_model(&planted_config(&data.layout), &data.layout, 13).unwrap();
    let s = Setting::ALL[0];
    let means = mean_head_outputs(&w, &k_shot(data, s, 10, 10, 13)).unwrap();
    let located = heads(&truth.heads);
    let two = heads(&[truth.heads[0], Coord::new(2, 0)]);
    let fv = mtlab::locate::extract_function_vector(&means, &two, s).unwrap();
    let random = plan_random_heads(1, 13, &w.config, &truth.heads).unwrap();
    let some_neurons = neurons(&[
        Coord::new(1, 17),
        Coord::new(2, 90),
        Coord::new(0, 200),
        Coord::new(3, 5),
        Coord::new(1, 250),
    ]);
    let plans = [
        vector_plan(&w, Strategy::Mtv, &located, &means, s, None).unwrap(),
        vector_plan(&w, Strategy::MtvI, &two, &means, s, None).unwrap(),
        plan_mtv_i_d(&fv, &two, &w.config, Strategy::MtvID).unwrap(),
        plan_neuron_edit(
            &some_neurons,
            NeuronEditMode::Amplify(2.0),
            &w.config,
            Strategy::MtNeurons,
        )
        .unwrap(),
        plan_neuron_edit(
            &some_neurons,
            NeuronEditMode::Erase,
            &w.config,
            Strategy::RpNeurons,
        )
        .unwrap(),
        vector_plan(&w, Strategy::RandomHeads, &random, &means, s, None).unwrap(),
    ];
    let cfg = RunConfig::default().eval;
    let set = build_eval_set(data, s, Shot::One, cfg.bench_cases, 13).unwrap();
    let prompts: Vec<TokenSeq> = set.prompts.iter().map(|p| p.rendered.clone()).collect();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for plan in &plans {
        let r = bench_overhead(&w, plan, &prompts, cfg.bench_max_new_tokens, 7).unwrap();
        worst = worst.max(r.per_token_ratio);
        parts.push(format!("{} {:.3}", plan.strategy, r.per_token_ratio));
    }
    outcome(
        worst <= 1.25,
        format!("per-token ratios: {}", parts.join(", ")),
    )
}

fn c14_trained_zero_vs_one() -> Outcome {
    let cfg = RunConfig::default();
    let data = generate_corpus(&cfg.corpus_config()).unwrap();
    let w = train_toy_model(&cfg.model, &data, &cfg.train_config()).unwrap();
    let lmr = |shot: Shot| {
        let sets: Vec<_> = Setting::ALL
            .into_iter()
            .map(|s| build_eval_set(&data, s, shot, 25, 14).unwrap())
            .collect();
        let r = evaluate_plan(&w, &data, &EditPlan::empty(), &sets, 30).unwrap();
        r.settings.iter().map(|s| s.baseline.lmr).sum::<f64>() / 4.0
    };
    let (z, o) = (lmr(Shot::Zero), lmr(Shot::One));
    outcome(
        z > o,
        format!("trained toy model: zero-shot LMR {z:.3}, one-shot LMR {o:.3}"),
    )
}

#[test]
fn acceptance() {
    let data = corpus();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "IG completeness", Box::new(c1_ig_completeness)),
        (2, "gradient oracle", Box::new(c2_gradient_oracle)),
        (3, "self-patch zero CIE", Box::new(|| c3_self_patch(&data))),
        (
            4,
            "null-edit equivalence",
            Box::new(|| c4_null_edits(&data)),
        ),
        (
            5,
            "planted-head recovery",
            Box::new(|| c5_head_recovery(&data)),
        ),
        (
            6,
            "language-mismatch round trip",
            Box::new(|| c6_language_round_trip(&data)),
        ),
        (
            7,
            "planted-neuron recovery and repair",
            Box::new(|| c7_repetition(&data)),
        ),
        (
            8,
            "repetition detector oracle",
            Box::new(c8_repetition_oracle),
        ),
        (9, "BLEU hand case", Box::new(c9_bleu)),
        (
            10,
            "intersection fixture",
            Box::new(c10_intersection_fixture),
        ),
        (
            11,
            "relative-change arithmetic",
            Box::new(c11_relative_change),
        ),
        (12, "transfer property", Box::new(|| c12_transfer(&data))),
        (13, "generation overhead", Box::new(|| c13_overhead(&data))),
        (
            14,
            "zero-shot vs one-shot mismatch (soft)",
            Box::new(c14_trained_zero_vs_one),
        ),
    ];
    let mut gating_failures = Vec::new();
    let mut err = std::io::stderr();
    for (n, name, run) in &criteria {
        let t0 = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        writeln!(
            err,
            "criterion {n:2} {verdict} {name}: {} [{:.1}s]",
            o.detail,
            t0.elapsed().as_secs_f64()
        )
        .unwrap();
        if !o.pass && *n != 14 {
            gating_failures.push(*n);
        }
    }
    assert!(
        gating_failures.is_empty(),
        "failing criteria: {gating_failures:?}"
    );
}
