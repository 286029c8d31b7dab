// SPDX-License-Identifier: MIT OR Apache-2.0

//! Integrated-gradient neuron attribution for next-token translation.

use mtlab::corpus::{generate_corpus, CorpusConfig, Setting};
use mtlab::locate::locate_mt_neurons;
use mtlab::pipeline::{build_eval_set, Shot};
use mtlab::testbed::{plant_language_model, planted_config};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(40))?;
    let (w, _) = plant_language_model(&planted_config(&data.layout), &data.layout, 0)?;
    let set = build_eval_set(&data, Setting::ALL[1], Shot::One, 4, 0)?;
    let (scores, top) = locate_mt_neurons(&w, &set.prompts, 4, 10, 0, 10)?;
    println!(
        "{} neurons scored over {} cases",
        scores.scores.len(),
        scores.count
    );
    for (c, s) in top.items.iter().zip(&top.scores) {
        println!("  L{} n{}: {s:.4}", c.layer, c.index);
    }
    Ok(())
}
