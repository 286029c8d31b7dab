// SPDX-License-Identifier: MIT OR Apache-2.0

//! Builds both planted models and checks their behavioural contracts.

use mtlab::corpus::{generate_corpus, CorpusConfig};
use mtlab::testbed::{
    check_language_contract, check_repetition_contract, plant_language_model,
    plant_repetition_model, planted_config,
};

fn main() -> mtlab::error::Result<()> {
    let data = generate_corpus(&CorpusConfig::default().scaled(40))?;
    let config = planted_config(&data.layout);
    let (w, truth) = plant_language_model(&config, &data.layout, 3)?;
    println!("language head at {:?}", truth.heads);
    let r = check_language_contract(&w, &truth, &data, 20, 0)?;
    println!("{r:#?}");

    let (w, truth) = plant_repetition_model(&config, &data.layout, 3)?;
    println!("repetition neuron at {:?}", truth.neurons);
    let r = check_repetition_contract(&w, &truth, &data, 10, 200, 0)?;
    println!("{r:#?}");
    Ok(())
}
