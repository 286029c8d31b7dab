// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generation cost with and without an edit plan.

use mtlab::corpus::{generate_corpus, CorpusConfig, Setting};
use mtlab::edit::{plan_neuron_edit, NeuronEditMode, Strategy};
use mtlab::locate::{ComponentKind, Coord, LocatedComponents, Provenance};
use mtlab::pipeline::{bench_overhead, build_eval_set, Shot};
use mtlab::testbed::{plant_language_model, planted_config};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(20))?;
    let (w, _) = plant_language_model(&planted_config(&data.layout), &data.layout, 0)?;
    let neurons = (0..5)
        .map(|i| {
            (
                Coord {
                    layer: 1,
                    index: 100 + i,
                },
                1.0,
            )
        })
        .collect();
    let neurons =
        LocatedComponents::from_scored(ComponentKind::Neuron, neurons, Provenance::default())?;
    let plan = plan_neuron_edit(
        &neurons,
        NeuronEditMode::Erase,
        &w.config,
        Strategy::MtNeurons,
    )?;
    let set = build_eval_set(&data, Setting::ALL[0], Shot::One, 10, 0)?;
    let prompts: Vec<_> = set.prompts.iter().map(|p| p.rendered.clone()).collect();
    let r = bench_overhead(&w, &plan, &prompts, 24, 3)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}
