// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-shot language mismatch on a planted model, repaired by adding a
//! function vector to the residual stream.

use mtlab::corpus::{generate_corpus, CorpusConfig, Setting};
use mtlab::edit::Strategy;
use mtlab::locate::{mean_head_outputs, ComponentKind, LocatedComponents, Provenance};
use mtlab::pipeline::{build_eval_set, evaluate_plan, vector_plan, Shot};
use mtlab::testbed::{plant_language_model, planted_config};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(40))?;
    let (w, truth) = plant_language_model(&planted_config(&data.layout), &data.layout, 1)?;
    let heads = LocatedComponents::from_scored(
        ComponentKind::Head,
        vec![(truth.heads[0], 1.0)],
        Provenance::default(),
    )?;
    for setting in Setting::ALL {
        let ten_shot = build_eval_set(&data, setting, Shot::Five, 10, 0)?;
        let means = mean_head_outputs(&w, &ten_shot.prompts)?;
        let plan = vector_plan(&w, Strategy::Mtv, &heads, &means, setting, None)?;
        let set = build_eval_set(&data, setting, Shot::Zero, 20, 1)?;
        let r = evaluate_plan(&w, &data, &plan, &[set], 40)?;
        let s = &r.settings[0];
        println!(
            "{setting}: LMR {:.2} -> {:.2} ({:?}%), BLEU {:.1} -> {:.1}",
            s.baseline.lmr, s.edited.lmr, s.relative.lmr, s.baseline.bleu, s.edited.bleu
        );
    }
    Ok(())
}
