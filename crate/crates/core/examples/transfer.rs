// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heads found on one direction, applied with every direction's vector and
//! compared against as many random heads.

use std::collections::BTreeMap;

use mtlab::corpus::{generate_corpus, CorpusConfig, Setting};
use mtlab::edit::Strategy;
use mtlab::locate::{mean_head_outputs, ComponentKind, LocatedComponents, Provenance};
use mtlab::pipeline::{build_eval_set, transfer_eval, Shot};
use mtlab::testbed::{plant_language_model, planted_config};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(40))?;
    let (w, truth) = plant_language_model(&planted_config(&data.layout), &data.layout, 4)?;
    let heads = LocatedComponents::from_scored(
        ComponentKind::Head,
        vec![(truth.heads[0], 1.0)],
        Provenance::default(),
    )?;
    let mut means = BTreeMap::new();
    let mut sets = Vec::new();
    for s in Setting::ALL {
        means.insert(
            s,
            mean_head_outputs(&w, &build_eval_set(&data, s, Shot::Five, 10, 0)?.prompts)?,
        );
        sets.push(build_eval_set(&data, s, Shot::Zero, 15, 1)?);
    }
    let r = transfer_eval(
        &w,
        &data,
        Setting::ALL[0],
        &heads,
        &means,
        &sets,
        Strategy::Mtv,
        None,
        9,
        40,
    )?;
    for p in &r.pairs {
        println!(
            "{}: LMR reduction located {:.2} vs random {:.2} ({:?})",
            p.setting, p.lmr_reduction_located, p.lmr_reduction_random, p.random_heads
        );
    }
    Ok(())
}
