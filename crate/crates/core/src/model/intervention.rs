// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation edits applied during a forward pass.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Which sequence positions an edit touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionSelector {
    /// The final prompt position (the one predicting the first output token).
    LastPromptToken,
    AllPositions,
    /// The last prompt token and every position after the prompt.
    GeneratedPositions,
    ExplicitPositions(BTreeSet<usize>),
}

impl PositionSelector {
    #[inline]
    pub fn contains(&self, pos: usize, prompt_len: usize) -> bool {
        match self {
            PositionSelector::LastPromptToken => pos + 1 == prompt_len,
            PositionSelector::AllPositions => true,
            PositionSelector::GeneratedPositions => pos + 1 >= prompt_len,
            PositionSelector::ExplicitPositions(set) => set.contains(&pos),
        }
    }

    pub fn explicit<I: IntoIterator<Item = usize>>(positions: I) -> Self {
        PositionSelector::ExplicitPositions(positions.into_iter().collect())
    }
}

/// One atomic activation edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Edit {
    ReplaceHeadContribution {
        layer: usize,
        head: usize,
        selector: PositionSelector,
        vector: Vec<f64>,
    },
    AddToHeadContribution {
        layer: usize,
        head: usize,
        selector: PositionSelector,
        vector: Vec<f64>,
    },
    /// Added to the residual stream at the input of `layer`.
    AddToResidual {
        layer: usize,
        selector: PositionSelector,
        vector: Vec<f64>,
    },
    ScaleNeuron {
        layer: usize,
        neuron: usize,
        selector: PositionSelector,
        factor: f64,
    },
    ClampNeuron {
        layer: usize,
        neuron: usize,
        selector: PositionSelector,
        value: f64,
    },
}

impl Edit {
    pub fn layer(&self) -> usize {
        match self {
            Edit::ReplaceHeadContribution { layer, .. }
            | Edit::AddToHeadContribution { layer, .. }
            | Edit::AddToResidual { layer, .. }
            | Edit::ScaleNeuron { layer, .. }
            | Edit::ClampNeuron { layer, .. } => *layer,
        }
    }

    pub fn selector(&self) -> &PositionSelector {
        match self {
            Edit::ReplaceHeadContribution { selector, .. }
            | Edit::AddToHeadContribution { selector, .. }
            | Edit::AddToResidual { selector, .. }
            | Edit::ScaleNeuron { selector, .. }
            | Edit::ClampNeuron { selector, .. } => selector,
        }
    }

    fn key(&self) -> (u8, usize, usize) {
        match self {
            Edit::ReplaceHeadContribution { layer, head, .. } => (0, *layer, *head),
            Edit::AddToHeadContribution { layer, head, .. } => (1, *layer, *head),
            Edit::AddToResidual { layer, .. } => (2, *layer, 0),
            Edit::ScaleNeuron { layer, neuron, .. } => (3, *layer, *neuron),
            Edit::ClampNeuron { layer, neuron, .. } => (4, *layer, *neuron),
        }
    }
}

/// An ordered list of edits; at most one per `(kind, layer, head/neuron)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub edits: Vec<Edit>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        InterventionSpec::default()
    }

    pub fn single(edit: Edit) -> Self {
        InterventionSpec { edits: vec![edit] }
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn push(&mut self, edit: Edit) {
        self.edits.push(edit);
    }

    /// Concatenation of two specs (validated on use).
    pub fn merged(&self, other: &InterventionSpec) -> InterventionSpec {
        let mut edits = self.edits.clone();
        edits.extend(other.edits.iter().cloned());
        InterventionSpec { edits }
    }

    /// Checks bounds, vector lengths and the one-edit-per-site rule.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.edits {
            let layer = e.layer();
            if layer >= config.n_layers {
                return Err(Error::OutOfBounds(format!(
                    "edit layer {layer} >= n_layers {}",
                    config.n_layers
                )));
            }
            match e {
                Edit::ReplaceHeadContribution { head, vector, .. }
                | Edit::AddToHeadContribution { head, vector, .. } => {
                    if *head >= config.n_heads {
                        return Err(Error::OutOfBounds(format!(
                            "head {head} >= n_heads {}",
                            config.n_heads
                        )));
                    }
                    check_vec(vector, config.d_model)?;
                }
                Edit::AddToResidual { vector, .. } => check_vec(vector, config.d_model)?,
                Edit::ScaleNeuron { neuron, factor, .. } => {
                    check_neuron(*neuron, config)?;
                    if !factor.is_finite() {
                        return Err(Error::InvalidIntervention("non-finite scale".into()));
                    }
                }
                Edit::ClampNeuron { neuron, value, .. } => {
                    check_neuron(*neuron, config)?;
                    if !value.is_finite() {
                        return Err(Error::InvalidIntervention("non-finite clamp".into()));
                    }
                }
            }
            if !seen.insert(e.key()) {
                return Err(Error::InvalidIntervention(format!(
                    "duplicate edit for site {:?}",
                    e.key()
                )));
            }
        }
        Ok(())
    }
}

fn check_vec(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::InvalidIntervention(format!(
            "vector length {} != d_model {d}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidIntervention("non-finite vector".into()));
    }
    Ok(())
}

fn check_neuron(n: usize, config: &ModelConfig) -> Result<()> {
    if n >= config.d_ff {
        return Err(Error::OutOfBounds(format!(
            "neuron {n} >= d_ff {}",
            config.d_ff
        )));
    }
    Ok(())
}

/// Edits grouped per layer for fast lookup inside the forward pass.
#[derive(Default)]
pub(crate) struct LayerEdits<'a> {
    pub residual: Vec<(&'a PositionSelector, &'a [f64])>,
    pub head_replace: Vec<(usize, &'a PositionSelector, &'a [f64])>,
    pub head_add: Vec<(usize, &'a PositionSelector, &'a [f64])>,
    pub clamp: Vec<(usize, &'a PositionSelector, f64)>,
    pub scale: Vec<(usize, &'a PositionSelector, f64)>,
}

impl LayerEdits<'_> {
    pub fn touches_heads(&self) -> bool {
        !self.head_replace.is_empty() || !self.head_add.is_empty()
    }
}

pub(crate) fn group_by_layer(spec: &InterventionSpec, n_layers: usize) -> Vec<LayerEdits<'_>> {
    let mut out: Vec<LayerEdits<'_>> = (0..n_layers).map(|_| LayerEdits::default()).collect();
    for e in &spec.edits {
        match e {
            Edit::ReplaceHeadContribution {
                layer,
                head,
                selector,
                vector,
            } => out[*layer].head_replace.push((*head, selector, vector)),
            Edit::AddToHeadContribution {
                layer,
                head,
                selector,
                vector,
            } => out[*layer].head_add.push((*head, selector, vector)),
            Edit::AddToResidual {
                layer,
                selector,
                vector,
            } => out[*layer].residual.push((selector, vector)),
            Edit::ScaleNeuron {
                layer,
                neuron,
                selector,
                factor,
            } => out[*layer].scale.push((*neuron, selector, *factor)),
            Edit::ClampNeuron {
                layer,
                neuron,
                selector,
                value,
            } => out[*layer].clamp.push((*neuron, selector, *value)),
        }
    }
    out
}
