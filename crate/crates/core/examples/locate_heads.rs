// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal head attribution on a planted model, then a function vector from
//! the winner.

use mtlab::corpus::{
    generate_corpus, make_shuffled, render_prompt, sample_exemplars, CorpusConfig, PromptTemplate,
    SampleStrategy, Setting,
};
use mtlab::locate::{causal_aie, extract_function_vector, mean_head_outputs, select_top_heads};
use mtlab::model::ScoreMode;
use mtlab::testbed::{plant_language_model, planted_config};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(40))?;
    let (w, truth) = plant_language_model(&planted_config(&data.layout), &data.layout, 5)?;
    let setting = Setting::ALL[0];
    let split = data.splits(setting)?;
    let mut rng = mtlab::rng::named(0, "example");
    let prompts = split.train[..8]
        .iter()
        .map(|q| {
            render_prompt(
                &PromptTemplate::default(),
                &sample_exemplars(&split.exps, 10, SampleStrategy::Uniform, &mut rng)?,
                q,
                10,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let shuffled = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| make_shuffled(p, &split.exps, i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let means = mean_head_outputs(&w, &prompts)?;
    let aie = causal_aie(
        &w,
        &prompts,
        &shuffled,
        &means,
        ScoreMode::FirstTokenProb,
        true,
    )?;
    print!("{}", aie.to_csv());
    let top = select_top_heads(&aie, 3)?;
    println!("planted {:?}, ranked {:?}", truth.heads, top.items);
    let fv = extract_function_vector(&means, &top.truncated(1), setting)?;
    let norm = fv.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("function vector norm {norm:.3}");
    Ok(())
}
