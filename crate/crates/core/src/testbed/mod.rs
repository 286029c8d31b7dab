// SPDX-License-Identifier: MIT OR Apache-2.0

//! Models to run the pipeline on: hand-planted ones with a known answer and
//! small trained ones.

mod contract;
mod planted;
mod train;

pub use contract::{
    check_language_contract, check_repetition_contract, contract_prompts, head_ablation_effects,
    non_pivot_settings, LanguageContractReport, RepetitionContractReport,
};
pub use planted::{
    plant_language_model, plant_repetition_model, planted_config, PlantedGroundTruth,
    LANGUAGE_CONTRACT, REPETITION_CONTRACT,
};
pub use train::{
    loss_and_grad, train_toy_model, train_toy_model_logged, Adam, AdamConfig, TrainConfig,
    TrainSample, SHOTS,
};
