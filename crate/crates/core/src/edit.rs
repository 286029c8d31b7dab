// SPDX-License-Identifier: MIT OR Apache-2.0

//! Editing plans compiled from located components and function vectors.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::Setting;
use crate::error::{Error, Result};
use crate::locate::{ComponentKind, Coord, FunctionVector, LocatedComponents, Provenance};
use crate::model::{Edit, InterventionSpec, ModelConfig, PositionSelector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MTV")]
    Mtv,
    #[serde(rename = "MTV-I")]
    MtvI,
    #[serde(rename = "MTV-I-D")]
    MtvID,
    #[serde(rename = "MT-neurons")]
    MtNeurons,
    #[serde(rename = "RP-neurons")]
    RpNeurons,
    RandomHeads,
    Empty,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap())
    }
}

/// Where a plan's vector came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorSource {
    pub setting: Setting,
    pub heads: Vec<Coord>,
    pub prompt_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub strategy: Strategy,
    pub spec: InterventionSpec,
    pub components: Vec<Coord>,
    pub vector: Option<VectorSource>,
}

impl EditPlan {
    pub fn empty() -> Self {
        EditPlan {
            strategy: Strategy::Empty,
            spec: InterventionSpec::none(),
            components: Vec::new(),
            vector: None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.spec.validate(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NeuronEditMode {
    Amplify(f64),
    Erase,
}

impl Default for NeuronEditMode {
    fn default() -> Self {
        NeuronEditMode::Amplify(2.0)
    }
}

fn source(fv: &FunctionVector) -> VectorSource {
    VectorSource {
        setting: fv.setting,
        heads: fv.heads.clone(),
        prompt_count: fv.prompt_count,
    }
}

/// The injection layer at the same relative depth as layer 11 of 32.
pub fn default_mtv_layer(n_layers: usize) -> usize {
    n_layers * 11 / 32
}

/// Adds `V` to the residual stream entering `layer` at the last prompt
/// token and every generated position.
pub fn plan_mtv(
    fv: &FunctionVector,
    layer: usize,
    config: &ModelConfig,
    strategy: Strategy,
) -> Result<EditPlan> {
    if !matches!(
        strategy,
        Strategy::Mtv | Strategy::MtvI | Strategy::RandomHeads
    ) {
        return Err(Error::InvalidArgument(format!(
            "{strategy} is not a residual-vector strategy"
        )));
    }
    if layer >= config.n_layers {
        return Err(Error::OutOfBounds(format!(
            "layer {layer} >= n_layers {}",
            config.n_layers
        )));
    }
    let plan = EditPlan {
        strategy,
        spec: InterventionSpec::single(Edit::AddToResidual {
            layer,
            selector: PositionSelector::GeneratedPositions,
            vector: fv.vector.clone(),
        }),
        components: fv.heads.clone(),
        vector: Some(source(fv)),
    };
    plan.validate(config)?;
    Ok(plan)
}

/// Splits `v` into `n` parts whose left-to-right sum is exactly `v`.
///
/// The first `n - 1` parts are `v / n` rounded to `f32` precision, so their
/// running sums are exact; the last part takes the exact remainder.
pub fn split_evenly(v: &[f64], n: usize) -> Vec<Vec<f64>> {
    assert!(n > 0);
    let k = (n - 1) as f64;
    let share: Vec<f64> = v
        .iter()
        .map(|&x| {
            let q = (x / n as f64) as f32 as f64;
            if q.is_finite() {
                q
            } else {
                x / n as f64
            }
        })
        .collect();
    let last: Vec<f64> = v.iter().zip(&share).map(|(x, q)| x - k * q).collect();
    let mut parts = vec![share; n - 1];
    parts.push(last);
    parts
}

/// Divides `V` evenly over the heads and adds each part to that head's
/// contribution.
pub fn plan_mtv_i_d(
    fv: &FunctionVector,
    heads: &LocatedComponents,
    config: &ModelConfig,
    strategy: Strategy,
) -> Result<EditPlan> {
    if heads.is_empty() {
        return Err(Error::Empty("head set"));
    }
    if !matches!(strategy, Strategy::MtvID | Strategy::RandomHeads) {
        return Err(Error::InvalidArgument(format!(
            "{strategy} is not a per-head strategy"
        )));
    }
    let parts = split_evenly(&fv.vector, heads.len());
    let mut spec = InterventionSpec::none();
    for (c, part) in heads.items.iter().zip(parts) {
        spec.push(Edit::AddToHeadContribution {
            layer: c.layer,
            head: c.index,
            selector: PositionSelector::GeneratedPositions,
            vector: part,
        });
    }
    let plan = EditPlan {
        strategy,
        spec,
        components: heads.items.clone(),
        vector: Some(source(fv)),
    };
    plan.validate(config)?;
    Ok(plan)
}

/// Scales or zeroes each neuron at every position.
pub fn plan_neuron_edit(
    neurons: &LocatedComponents,
    mode: NeuronEditMode,
    config: &ModelConfig,
    strategy: Strategy,
) -> Result<EditPlan> {
    if neurons.is_empty() {
        return Err(Error::Empty("neuron set"));
    }
    if neurons.kind != ComponentKind::Neuron {
        return Err(Error::InvalidArgument("component list holds heads".into()));
    }
    if !matches!(strategy, Strategy::MtNeurons | Strategy::RpNeurons) {
        return Err(Error::InvalidArgument(format!(
            "{strategy} is not a neuron strategy"
        )));
    }
    let mut spec = InterventionSpec::none();
    for c in &neurons.items {
        spec.push(match mode {
            NeuronEditMode::Amplify(factor) => {
                if !(factor > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "amplify factor {factor} must be positive"
                    )));
                }
                Edit::ScaleNeuron {
                    layer: c.layer,
                    neuron: c.index,
                    selector: PositionSelector::AllPositions,
                    factor,
                }
            }
            NeuronEditMode::Erase => Edit::ClampNeuron {
                layer: c.layer,
                neuron: c.index,
                selector: PositionSelector::AllPositions,
                value: 0.0,
            },
        });
    }
    let plan = EditPlan {
        strategy,
        spec,
        components: neurons.items.clone(),
        vector: None,
    };
    plan.validate(config)?;
    Ok(plan)
}

/// `k` distinct heads drawn uniformly from those not in `exclude`.
pub fn plan_random_heads(
    k: usize,
    seed: u64,
    config: &ModelConfig,
    exclude: &[Coord],
) -> Result<LocatedComponents> {
    let pool: Vec<Coord> = (0..config.n_layers)
        .flat_map(|l| (0..config.n_heads).map(move |h| Coord::new(l, h)))
        .filter(|c| !exclude.contains(c))
        .collect();
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} random heads from a pool of {}",
            pool.len()
        )));
    }
    let mut r = rng::named(seed, "random-heads");
    let mut picked: Vec<Coord> = sample(&mut r, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort();
    // equal scores, so canonical order is by coordinate
    LocatedComponents::from_scored(
        ComponentKind::Head,
        picked.into_iter().map(|c| (c, 0.0)).collect(),
        Provenance {
            settings: Vec::new(),
            selection: format!("{k} uniform random heads"),
            seed: Some(seed),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    fn fv(v: Vec<f64>) -> FunctionVector {
        FunctionVector {
            setting: Setting::ALL[0],
            heads: vec![Coord::new(0, 0)],
            vector: v,
            prompt_count: 1,
        }
    }

    fn heads(n: usize) -> LocatedComponents {
        LocatedComponents::from_scored(
            ComponentKind::Head,
            (0..n)
                .map(|i| (Coord::new(i / 4, i % 4), -(i as f64)))
                .collect(),
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn default_layer_keeps_relative_depth() {
        assert_eq!(default_mtv_layer(32), 11);
        assert_eq!(default_mtv_layer(4), 1);
    }

    #[test]
    fn mtv_layer_bounds() {
        let cfg = ModelConfig::new(4, 4, 3, 10, 10);
        assert!(plan_mtv(&fv(vec![1.0; 3]), 4, &cfg, Strategy::Mtv).is_err());
        let p = plan_mtv(&fv(vec![1.0; 3]), 1, &cfg, Strategy::MtvI).unwrap();
        assert_eq!(p.spec.edits.len(), 1);
    }

    #[test]
    fn twelve_way_split() {
        let cfg = ModelConfig::new(4, 4, 3, 10, 10);
        let p = plan_mtv_i_d(&fv(vec![1.2, -3.0, 0.7]), &heads(12), &cfg, Strategy::MtvID).unwrap();
        for e in &p.spec.edits {
            let Edit::AddToHeadContribution { vector, .. } = e else {
                panic!()
            };
            assert!((vector[0] - 0.1).abs() < 1e-7);
        }
        assert!(plan_mtv_i_d(&fv(vec![1.0; 3]), &heads(0), &cfg, Strategy::MtvID).is_err());
    }

    #[test]
    fn neuron_modes() {
        let cfg = ModelConfig::new(2, 2, 4, 10, 10);
        let n = LocatedComponents::from_scored(
            ComponentKind::Neuron,
            vec![(Coord::new(1, 3), 1.0)],
            Provenance::default(),
        )
        .unwrap();
        let p = plan_neuron_edit(&n, NeuronEditMode::default(), &cfg, Strategy::MtNeurons).unwrap();
        assert!(matches!(p.spec.edits[0], Edit::ScaleNeuron { factor, .. } if factor == 2.0));
        let p = plan_neuron_edit(&n, NeuronEditMode::Erase, &cfg, Strategy::RpNeurons).unwrap();
        assert!(matches!(p.spec.edits[0], Edit::ClampNeuron { value, .. } if value == 0.0));
        assert!(
            plan_neuron_edit(&n, NeuronEditMode::Amplify(0.0), &cfg, Strategy::MtNeurons).is_err()
        );
    }

    #[test]
    fn random_heads_are_seeded_and_distinct() {
        let cfg = ModelConfig::new(4, 4, 4, 10, 10);
        let ex = [Coord::new(0, 0), Coord::new(3, 3)];
        let a = plan_random_heads(12, 9, &cfg, &ex).unwrap();
        assert_eq!(a, plan_random_heads(12, 9, &cfg, &ex).unwrap());
        let set: std::collections::BTreeSet<_> = a.items.iter().collect();
        assert_eq!(set.len(), 12);
        assert!(ex.iter().all(|c| !a.contains(c)));
        assert!(plan_random_heads(15, 9, &cfg, &ex).is_err());
    }

    #[test]
    fn strategy_names() {
        assert_eq!(Strategy::MtvID.to_string(), "MTV-I-D");
        assert_eq!(Strategy::RandomHeads.to_string(), "RandomHeads");
    }

    proptest! {
        #[test]
        fn parts_sum_to_v_bitwise(v in prop::collection::vec(-1e6f64..1e6, 1..8), n in 1usize..40) {
            let parts = split_evenly(&v, n);
            prop_assert_eq!(parts.len(), n);
            for i in 0..v.len() {
                let mut s = 0.0;
                for p in &parts {
                    s += p[i];
                }
                prop_assert_eq!(s.to_bits(), v[i].to_bits());
            }
        }
    }
}
