// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locating translation-relevant heads and neurons.
//!
//! Heads are ranked by average indirect effect: how much patching a head's
//! clean mean output into a run on a shuffled prompt restores the target
//! score. Neurons are ranked by integrated-gradient attribution.

mod heads;
mod neurons;
mod suffix;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Setting;
use crate::error::{Error, Result};
pub use heads::{
    causal_aie, extract_function_vector, mean_head_outputs, select_top_heads, AieMap,
    FunctionVector, MeanHeadOutputs,
};
pub use neurons::{
    attribution_scores, ig_attribution, ig_from_probe, locate_mt_neurons,
    locate_repetition_neurons, repetition_case, scoring_case, AttributionCase, AttributionScores,
    AttributionVariant, RepetitionLocating, RepetitionScoringCase, ScoringCase,
};

/// A head `(layer, head)` or a neuron `(layer, neuron)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub layer: usize,
    pub index: usize,
}

pub type HeadCoord = Coord;
pub type NeuronCoord = Coord;

impl Coord {
    pub const fn new(layer: usize, index: usize) -> Self {
        Coord { layer, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    Head,
    Neuron,
}

/// Where a component list came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub settings: Vec<Setting>,
    pub selection: String,
    pub seed: Option<u64>,
}

/// Components ordered by descending score, ties by ascending coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocatedComponents {
    pub kind: ComponentKind,
    pub items: Vec<Coord>,
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

impl LocatedComponents {
    /// Sorts `(coord, score)` pairs into canonical order and checks them.
    pub fn from_scored(
        kind: ComponentKind,
        mut scored: Vec<(Coord, f64)>,
        provenance: Provenance,
    ) -> Result<Self> {
        if scored.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite("component score".into()));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut seen = BTreeSet::new();
        if !scored.iter().all(|(c, _)| seen.insert(*c)) {
            return Err(Error::InvalidArgument("duplicate component".into()));
        }
        Ok(LocatedComponents {
            kind,
            items: scored.iter().map(|p| p.0).collect(),
            scores: scored.iter().map(|p| p.1).collect(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncated(&self, n: usize) -> LocatedComponents {
        let mut out = self.clone();
        out.items.truncate(n);
        out.scores.truncate(n);
        out
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.items.contains(c)
    }
}

/// Ranks `scores` (indexed `layer * per_layer + index`) and keeps the top `k`.
pub(crate) fn top_k(
    kind: ComponentKind,
    scores: &[f64],
    per_layer: usize,
    k: usize,
    provenance: Provenance,
) -> Result<LocatedComponents> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k {k} outside 1..={}",
            scores.len()
        )));
    }
    let scored = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (Coord::new(i / per_layer, i % per_layer), s))
        .collect();
    Ok(LocatedComponents::from_scored(kind, scored, provenance)?.truncated(k))
}

/// Keeps components present in every setting's top `pre_top`, ordered by
/// their mean score across settings.
pub fn intersect_components(
    per_setting: &BTreeMap<Setting, LocatedComponents>,
    pre_top: usize,
    final_top: usize,
) -> Result<LocatedComponents> {
    if per_setting.len() < 2 {
        return Err(Error::InvalidArgument(
            "intersection needs at least two settings".into(),
        ));
    }
    if final_top > pre_top {
        return Err(Error::InvalidArgument("final_top exceeds pre_top".into()));
    }
    let kind = per_setting.values().next().unwrap().kind;
    let mut common: Option<BTreeSet<Coord>> = None;
    for (s, lc) in per_setting {
        if lc.kind != kind {
            return Err(Error::InvalidArgument("mixed component kinds".into()));
        }
        if lc.len() < pre_top {
            return Err(Error::InvalidArgument(format!(
                "{s} lists {} components, need {pre_top}",
                lc.len()
            )));
        }
        let set: BTreeSet<Coord> = lc.items[..pre_top].iter().copied().collect();
        common = Some(match common {
            None => set,
            Some(c) => c.intersection(&set).copied().collect(),
        });
    }
    let n = per_setting.len() as f64;
    let scored = common
        .unwrap_or_default()
        .into_iter()
        .map(|c| {
            let sum: f64 = per_setting
                .values()
                .map(|lc| lc.scores[lc.items.iter().position(|x| *x == c).unwrap()])
                .sum();
            (c, sum / n)
        })
        .collect();
    let provenance = Provenance {
        settings: per_setting.keys().copied().collect(),
        selection: format!("intersection of top-{pre_top}, keep {final_top}"),
        seed: None,
    };
    Ok(LocatedComponents::from_scored(kind, scored, provenance)?.truncated(final_top))
}
