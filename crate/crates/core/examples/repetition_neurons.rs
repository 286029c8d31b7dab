// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finds the planted repetition neuron from one looping generation and
//! erases it.

use mtlab::corpus::{generate_corpus, CorpusConfig, Setting, NL};
use mtlab::detect::detect_repetition;
use mtlab::edit::{plan_neuron_edit, NeuronEditMode, Strategy};
use mtlab::locate::{locate_repetition_neurons, repetition_case};
use mtlab::model::{generate, InterventionSpec};
use mtlab::pipeline::{build_eval_set, evaluate_setting, Shot};
use mtlab::testbed::{plant_repetition_model, planted_config};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(40))?;
    let (w, truth) = plant_repetition_model(&planted_config(&data.layout), &data.layout, 2)?;
    let set = build_eval_set(&data, Setting::ALL[0], Shot::One, 10, 0)?;

    let p = &set.prompts[0].rendered;
    let g = generate(&w, p, 60, &InterventionSpec::none(), NL)?;
    let v = detect_repetition(&g.tokens, g.hit_max);
    println!("looping unit {:?}", v.y_repe.0);
    let r = locate_repetition_neurons(&w, &[repetition_case(p, &v)?], 300, 5, 8)?;
    println!(
        "planted {:?}, selected {:?}",
        truth.neurons, r.selected.items
    );

    let plan = plan_neuron_edit(
        &r.selected.truncated(1),
        NeuronEditMode::Erase,
        &w.config,
        Strategy::RpNeurons,
    )?;
    let e = evaluate_setting(&w, &data, &plan, &set, 200)?;
    println!(
        "RR {:.2} -> {:.2}, BLEU {:.2} -> {:.2}",
        e.baseline.rr, e.edited.rr, e.baseline.bleu, e.edited.bleu
    );
    Ok(())
}
