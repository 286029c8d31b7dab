// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generates a small synthetic corpus and renders zero- and one-shot prompts.

use mtlab::corpus::{
    generate_corpus, render_prompt, sample_exemplars, CorpusConfig, PromptTemplate, SampleStrategy,
};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(20))?;
    println!("vocab size {}", data.layout.vocab_size());
    let mut rng = mtlab::rng::named(7, "example");
    for (setting, split) in &data.settings {
        println!(
            "{setting}: {} exemplars, {} train, {} test",
            split.exps.len(),
            split.train.len(),
            split.test.len()
        );
        let q = &split.test[0];
        for k in [0, 1] {
            let ex = sample_exemplars(&split.exps, k, SampleStrategy::Uniform, &mut rng)?;
            let p = render_prompt(&PromptTemplate::default(), &ex, q, k)?;
            println!("  {k}-shot prompt {:?} -> {:?}", p.rendered.0, q.tgt.0);
        }
    }
    Ok(())
}
