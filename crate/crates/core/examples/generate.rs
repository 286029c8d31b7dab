// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy decoding and sequence scoring on a randomly initialised toy model.

use mtlab::model::{
    generate, sequence_score, InterventionSpec, ModelConfig, ScoreMode, TokenSeq, Weights,
};

fn main() -> mtlab::error::Result<()> {
    let config = ModelConfig::toy(32, 64);
    let w = Weights::random(config, 0.3, &mut mtlab::rng::named(1, "example"));
    println!("{} parameters", w.n_params());
    let prompt = TokenSeq(vec![0, 5, 9, 2]);
    let g = generate(&w, &prompt, 12, &InterventionSpec::none(), 1)?;
    println!("generated {:?} (hit budget: {})", g.tokens.0, g.hit_max);
    let target = TokenSeq(g.tokens[..3].to_vec());
    for mode in [ScoreMode::FirstTokenProb, ScoreMode::MeanLogProb] {
        println!(
            "{mode:?}: {:.4}",
            sequence_score(&w, &prompt, &target, mode, &InterventionSpec::none())?
        );
    }
    Ok(())
}
