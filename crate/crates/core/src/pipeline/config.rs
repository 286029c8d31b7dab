// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::Shot;
use crate::corpus::{CorpusConfig, Setting};
use crate::edit::{NeuronEditMode, Strategy};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScoreMode};
use crate::testbed::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    LanguageHead,
    RepetitionNeuron,
}

/// Which model the `run` sequence builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    Planted,
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadStage {
    /// Exemplars per prompt for mean capture and shuffling.
    pub k_shot: usize,
    pub n_prompts: usize,
    pub mode: ScoreMode,
    pub pre_top: usize,
    pub final_top: usize,
}

impl Default for HeadStage {
    fn default() -> Self {
        HeadStage {
            k_shot: 10,
            n_prompts: 16,
            mode: ScoreMode::FirstTokenProb,
            pre_top: 4,
            final_top: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuronStage {
    /// Shots used to render MT attribution cases.
    pub shot: Shot,
    pub n_cases: usize,
    pub steps: usize,
    pub pre_top: usize,
    pub final_top: usize,
    /// Repetition attribution.
    pub rp_cases: usize,
    pub rp_pool: usize,
    pub rp_top: usize,
    pub rp_max_new_tokens: usize,
}

impl Default for NeuronStage {
    fn default() -> Self {
        NeuronStage {
            shot: Shot::One,
            n_cases: 8,
            steps: 20,
            pre_top: 300,
            final_top: 5,
            rp_cases: 4,
            rp_pool: 300,
            rp_top: 1,
            rp_max_new_tokens: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditStage {
    pub strategy: Strategy,
    /// Residual injection layer; proportional default when absent.
    pub layer: Option<usize>,
    pub neuron_mode: NeuronEditMode,
}

impl Default for EditStage {
    fn default() -> Self {
        EditStage {
            strategy: Strategy::Mtv,
            layer: None,
            neuron_mode: NeuronEditMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStage {
    /// Defaults to zero-shot for head strategies and one-shot for neuron ones.
    pub shot: Option<Shot>,
    pub n_cases: usize,
    pub max_new_tokens: usize,
    /// Source direction for the transfer experiment.
    pub transfer_source: Setting,
    pub bench_cases: usize,
    pub bench_max_new_tokens: usize,
    pub bench_repeats: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            shot: None,
            n_cases: 40,
            max_new_tokens: 400,
            transfer_source: Setting::ALL[0],
            bench_cases: 10,
            bench_max_new_tokens: 32,
            bench_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every stage derives a labelled stream from it.
    pub seed: u64,
    pub model_source: ModelSource,
    pub mechanism: Mechanism,
    pub corpus: CorpusConfig,
    /// Architecture of the trained model; planted models use their own.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub heads: HeadStage,
    pub neurons: NeuronStage,
    pub edit: EditStage,
    pub eval: EvalStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default().scaled(200);
        let mut model =
            ModelConfig::toy(corpus.layout().map(|l| l.vocab_size()).unwrap_or(156), 512);
        model.d_ff = 256;
        RunConfig {
            seed: 0,
            model_source: ModelSource::Planted,
            mechanism: Mechanism::LanguageHead,
            corpus,
            model,
            train: TrainConfig::default(),
            heads: HeadStage::default(),
            neurons: NeuronStage::default(),
            edit: EditStage::default(),
            eval: EvalStage::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        self.train.validate()?;
        if self.heads.final_top == 0 || self.heads.final_top > self.heads.pre_top {
            return bad(format!(
                "head final_top {} must lie in 1..=pre_top {}",
                self.heads.final_top, self.heads.pre_top
            ));
        }
        if self.neurons.final_top == 0 || self.neurons.final_top > self.neurons.pre_top {
            return bad(format!(
                "neuron final_top {} must lie in 1..=pre_top {}",
                self.neurons.final_top, self.neurons.pre_top
            ));
        }
        if self.heads.n_prompts == 0 || self.neurons.n_cases == 0 || self.eval.n_cases == 0 {
            return bad("case counts must be positive".into());
        }
        if self.neurons.steps == 0 {
            return bad("IG steps must be at least 1".into());
        }
        if self.eval.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if !self.corpus.settings.contains(&self.eval.transfer_source) {
            return bad(format!(
                "transfer source {} is not a corpus setting",
                self.eval.transfer_source
            ));
        }
        if let Some(l) = self.edit.layer {
            if l >= self.model.n_layers {
                return bad(format!("edit layer {l} out of range"));
            }
        }
        Ok(())
    }

    /// Corpus config with the master seed applied.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Strategy-dependent default shot.
    pub fn eval_shot(&self) -> Shot {
        self.eval.shot.unwrap_or(match self.edit.strategy {
            Strategy::MtNeurons | Strategy::RpNeurons => Shot::One,
            _ => Shot::Zero,
        })
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(s.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
