// SPDX-License-Identifier: MIT OR Apache-2.0

//! A short training run of the toy translator.

use mtlab::corpus::{generate_corpus, CorpusConfig};
use mtlab::model::ModelConfig;
use mtlab::testbed::{train_toy_model_logged, TrainConfig};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(20))?;
    let mut config = ModelConfig::new(2, 2, 32, data.layout.vocab_size(), 256);
    config.d_ff = 64;
    let tc = TrainConfig {
        steps: 40,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (_, losses) = train_toy_model_logged(&config, &data, &tc)?;
    for (i, l) in losses.iter().enumerate().step_by(10) {
        println!("step {i:3} loss {l:.3}");
    }
    println!("final loss {:.3}", losses.last().unwrap());
    Ok(())
}
