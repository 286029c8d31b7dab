// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequence scoring and neuron gradients.

use serde::{Deserialize, Serialize};

use super::forward::{check_input, embed, forward_chunk, ChunkOptions, KvCache, PositionContext};
use super::tensor::{dot, log_softmax_at, softmax_in_place};
use super::{backward_chunk, CaptureSpec, InterventionSpec, PositionSelector, TokenSeq, Weights};
use crate::error::{Error, Result};

/// How a target sequence is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    /// `p(target[0] | prompt)`.
    FirstTokenProb,
    /// Mean teacher-forced log-probability of the target tokens.
    MeanLogProb,
}

/// Scalar objectives that can be differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    FirstTokenProb,
    MeanLogProb,
    /// Raw pre-softmax logit of `target[0]` after the prompt.
    Logit,
}

impl From<ScoreMode> for ObjectiveKind {
    fn from(m: ScoreMode) -> Self {
        match m {
            ScoreMode::FirstTokenProb => ObjectiveKind::FirstTokenProb,
            ScoreMode::MeanLogProb => ObjectiveKind::MeanLogProb,
        }
    }
}

/// A target scored after a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub target: TokenSeq,
    pub kind: ObjectiveKind,
}

impl Objective {
    pub fn new(target: TokenSeq, kind: ObjectiveKind) -> Self {
        Objective { target, kind }
    }

    /// Tokens the model must see: the prompt, plus the teacher-forced
    /// target prefix for sequence objectives.
    pub fn input_tokens(&self, prompt: &TokenSeq) -> TokenSeq {
        match self.kind {
            ObjectiveKind::MeanLogProb => prompt.concat(&self.target[..self.target.len() - 1]),
            _ => prompt.clone(),
        }
    }

    /// Number of logit rows the objective reads.
    pub fn n_scored(&self) -> usize {
        match self.kind {
            ObjectiveKind::MeanLogProb => self.target.len(),
            _ => 1,
        }
    }

    /// Value and logit gradients for logits aligned with the scored positions.
    fn value_and_grad(&self, logits: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        match self.kind {
            ObjectiveKind::FirstTokenProb => {
                let t = self.target[0] as usize;
                let mut p = logits[0].clone();
                softmax_in_place(&mut p);
                let pt = p[t];
                let g: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| pt * (if i == t { 1.0 } else { 0.0 } - pi))
                    .collect();
                (pt, vec![g])
            }
            ObjectiveKind::Logit => {
                let t = self.target[0] as usize;
                let mut g = vec![0.0; logits[0].len()];
                g[t] = 1.0;
                (logits[0][t], vec![g])
            }
            ObjectiveKind::MeanLogProb => {
                let n = self.target.len() as f64;
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(logits.len());
                for (row, &t) in logits.iter().zip(self.target.iter()) {
                    total += log_softmax_at(row, t as usize);
                    let mut p = row.clone();
                    softmax_in_place(&mut p);
                    p.iter_mut().for_each(|x| *x = -*x / n);
                    p[t as usize] += 1.0 / n;
                    grads.push(p);
                }
                (total / n, grads)
            }
        }
    }

    /// Objective value from the logits of the scored positions.
    pub fn score_logits(&self, logits: &[Vec<f64>]) -> f64 {
        match self.kind {
            ObjectiveKind::FirstTokenProb => {
                (log_softmax_at(&logits[0], self.target[0] as usize)).exp()
            }
            ObjectiveKind::Logit => logits[0][self.target[0] as usize],
            ObjectiveKind::MeanLogProb => {
                let s: f64 = logits
                    .iter()
                    .zip(self.target.iter())
                    .map(|(row, &t)| log_softmax_at(row, t as usize))
                    .sum();
                s / self.target.len() as f64
            }
        }
    }
}

fn check_objective(prompt: &TokenSeq, obj: &Objective) -> Result<()> {
    if obj.target.is_empty() {
        return Err(Error::Empty("target"));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Value of `obj` after `prompt` under `interventions`.
pub fn objective_value(
    w: &Weights,
    prompt: &TokenSeq,
    obj: &Objective,
    interventions: &InterventionSpec,
) -> Result<f64> {
    check_objective(prompt, obj)?;
    let input = obj.input_tokens(prompt);
    check_input(w, &input, interventions)?;
    let capture = CaptureSpec::none();
    let mut cache = KvCache::for_weights(w);
    let st = forward_chunk(
        w,
        &mut cache,
        0,
        embed(w, &input, 0),
        0,
        interventions,
        &ChunkOptions {
            ctx: PositionContext {
                prompt_len: prompt.len(),
            },
            capture: &capture,
            keep: false,
            record_layer_outputs: false,
            logits_from: Some(prompt.len() - 1),
        },
    );
    finite(obj.score_logits(&st.logits), "objective")
}

/// Scores `target` after `prompt`.
pub fn sequence_score(
    w: &Weights,
    prompt: &TokenSeq,
    target: &TokenSeq,
    mode: ScoreMode,
    interventions: &InterventionSpec,
) -> Result<f64> {
    objective_value(
        w,
        prompt,
        &Objective::new(target.clone(), mode.into()),
        interventions,
    )
}

/// Repeated evaluation of an objective with one neuron of `layer` pinned
/// to chosen values at fixed positions.
///
/// The pass below the neuron's layer is computed once; each evaluation
/// reruns only the layers above it on the positions from the first clamped
/// (or scored) position onward.
pub struct ClampProbe<'a> {
    w: &'a Weights,
    obj: Objective,
    spec: &'a InterventionSpec,
    layer: usize,
    positions: Vec<usize>,
    prompt_len: usize,
    start: usize,
    cache: KvCache,
    base_out: Vec<f64>,
    natural: Vec<Vec<f64>>,
}

impl<'a> ClampProbe<'a> {
    /// `positions` are absolute positions in `prompt ++ target[..T-1]`.
    pub fn new(
        w: &'a Weights,
        prompt: &TokenSeq,
        obj: &Objective,
        spec: &'a InterventionSpec,
        layer: usize,
        positions: &[usize],
    ) -> Result<Self> {
        check_objective(prompt, obj)?;
        let input = obj.input_tokens(prompt);
        check_input(w, &input, spec)?;
        if layer >= w.config.n_layers {
            return Err(Error::OutOfBounds(format!("layer {layer}")));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= input.len()) {
            return Err(Error::OutOfBounds(format!(
                "position {p} beyond input length {}",
                input.len()
            )));
        }
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        let first_scored = prompt.len() - 1;
        let start = positions
            .first()
            .copied()
            .unwrap_or(first_scored)
            .min(first_scored);
        let d = w.config.d_model;
        let ctx = PositionContext {
            prompt_len: prompt.len(),
        };
        let none = CaptureSpec::none();
        let mut cache = KvCache::for_weights(w);
        if start > 0 {
            forward_chunk(
                w,
                &mut cache,
                0,
                embed(w, &input[..start], 0),
                0,
                spec,
                &ChunkOptions {
                    ctx,
                    capture: &none,
                    keep: false,
                    record_layer_outputs: false,
                    logits_from: None,
                },
            );
        }
        let capture =
            CaptureSpec::neurons_at(PositionSelector::explicit(positions.iter().copied()));
        let st = forward_chunk(
            w,
            &mut cache,
            0,
            embed(w, &input[start..], start),
            start,
            spec,
            &ChunkOptions {
                ctx,
                capture: &capture,
                keep: false,
                record_layer_outputs: true,
                logits_from: None,
            },
        );
        cache.truncate_from(layer + 1, start);
        let natural = (0..positions.len())
            .map(|k| st.trace.neurons_at(layer, k).to_vec())
            .collect();
        let base_out = st.layer_outputs[layer].clone();
        debug_assert_eq!(base_out.len(), (input.len() - start) * d);
        Ok(ClampProbe {
            w,
            obj: obj.clone(),
            spec,
            layer,
            positions,
            prompt_len: prompt.len(),
            start,
            cache,
            base_out,
            natural,
        })
    }

    /// Sorted, deduplicated clamp positions.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Unedited activation of `neuron` at each clamp position.
    pub fn natural(&self, neuron: usize) -> Vec<f64> {
        self.natural.iter().map(|a| a[neuron]).collect()
    }

    /// Objective value and its gradient with respect to the neuron's
    /// activation at each clamp position, with the activation pinned to
    /// `values` (one per position).
    pub fn eval(&mut self, neuron: usize, values: &[f64]) -> Result<(f64, Vec<f64>)> {
        assert_eq!(values.len(), self.positions.len());
        let w = self.w;
        let d = w.config.d_model;
        let col = w.layers[self.layer].w_down.column(neuron);
        let mut x = self.base_out.clone();
        for (k, &p) in self.positions.iter().enumerate() {
            let delta = values[k] - self.natural[k][neuron];
            let row = &mut x[(p - self.start) * d..(p - self.start + 1) * d];
            for (r, c) in row.iter_mut().zip(&col) {
                *r += delta * c;
            }
        }
        let none = CaptureSpec::none();
        let st = forward_chunk(
            w,
            &mut self.cache,
            self.layer + 1,
            x,
            self.start,
            self.spec,
            &ChunkOptions {
                ctx: PositionContext {
                    prompt_len: self.prompt_len,
                },
                capture: &none,
                keep: true,
                record_layer_outputs: false,
                logits_from: Some(self.prompt_len - 1 - self.start),
            },
        );
        let scored = &st.logits[..self.obj.n_scored()];
        let (value, mut dl) = self.obj.value_and_grad(scored);
        dl.resize(st.logits.len(), vec![0.0; w.config.vocab_size]);
        let back = backward_chunk(w, &self.cache, &st, &dl, false);
        self.cache.truncate_from(self.layer + 1, self.start);
        let g = back.d_layer_output(self.layer + 1, self.layer);
        let grads = self
            .positions
            .iter()
            .map(|&p| dot(&col, &g[(p - self.start) * d..(p - self.start + 1) * d]))
            .collect::<Vec<_>>();
        finite(value, "objective")?;
        if grads.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("neuron gradient".into()));
        }
        Ok((value, grads))
    }
}

/// `dF/dw` for neuron `(layer, neuron)` clamped to `clamp_value` at every
/// position of `prompt ++ target[..T-1]` matched by `selector`, summed over
/// those positions.
#[allow(clippy::too_many_arguments)]
pub fn neuron_gradient(
    w: &Weights,
    prompt: &TokenSeq,
    obj: &Objective,
    layer: usize,
    neuron: usize,
    clamp_value: f64,
    selector: &PositionSelector,
    interventions: &InterventionSpec,
) -> Result<f64> {
    if neuron >= w.config.d_ff {
        return Err(Error::OutOfBounds(format!("neuron {neuron}")));
    }
    check_objective(prompt, obj)?;
    let n = obj.input_tokens(prompt).len();
    let positions: Vec<usize> = (0..n)
        .filter(|&p| selector.contains(p, prompt.len()))
        .collect();
    let mut probe = ClampProbe::new(w, prompt, obj, interventions, layer, &positions)?;
    let values = vec![clamp_value; probe.positions().len()];
    let (_, g) = probe.eval(neuron, &values)?;
    Ok(g.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Edit, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Weights::random(ModelConfig::new(3, 2, 8, 12, 16), 0.8, &mut rng)
    }

    fn clamped(
        w: &Weights,
        prompt: &TokenSeq,
        obj: &Objective,
        layer: usize,
        neuron: usize,
        v: f64,
        sel: &PositionSelector,
    ) -> f64 {
        let spec = InterventionSpec::single(Edit::ClampNeuron {
            layer,
            neuron,
            selector: sel.clone(),
            value: v,
        });
        objective_value(w, prompt, obj, &spec).unwrap()
    }

    #[test]
    fn zero_weights_first_token_prob_is_uniform() {
        let w = Weights::zeros(ModelConfig::new(1, 1, 4, 8, 8));
        let s = sequence_score(
            &w,
            &TokenSeq::new(vec![1]),
            &TokenSeq::new(vec![3]),
            ScoreMode::FirstTokenProb,
            &InterventionSpec::none(),
        )
        .unwrap();
        assert!((s - 0.125).abs() < 1e-15);
    }

    #[test]
    fn empty_target_is_an_error() {
        let w = model(1);
        let r = sequence_score(
            &w,
            &TokenSeq::new(vec![1]),
            &TokenSeq::new(vec![]),
            ScoreMode::MeanLogProb,
            &InterventionSpec::none(),
        );
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn mean_log_prob_matches_composed_forwards() {
        let w = model(2);
        let none = InterventionSpec::none();
        let cap = CaptureSpec::none();
        let prompt = TokenSeq::new(vec![1, 5, 7]);
        let target = TokenSeq::new(vec![4, 9]);
        let s = sequence_score(&w, &prompt, &target, ScoreMode::MeanLogProb, &none).unwrap();
        let a = crate::model::forward(&w, &prompt, &none, &cap).unwrap();
        let b = crate::model::forward(&w, &prompt.concat(&[4]), &none, &cap).unwrap();
        let la = log_softmax_at(a.logits.last().unwrap(), 4);
        let lb = log_softmax_at(b.logits.last().unwrap(), 9);
        assert!((s - 0.5 * (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_difference_across_objectives() {
        let w = model(3);
        let prompt = TokenSeq::new(vec![2, 3, 11, 0]);
        for (kind, sel) in [
            (
                ObjectiveKind::FirstTokenProb,
                PositionSelector::LastPromptToken,
            ),
            (
                ObjectiveKind::MeanLogProb,
                PositionSelector::GeneratedPositions,
            ),
            (ObjectiveKind::Logit, PositionSelector::AllPositions),
        ] {
            let obj = Objective::new(TokenSeq::new(vec![6, 1, 8]), kind);
            for layer in 0..3 {
                let neuron = 5 + layer * 7;
                let v = 0.3;
                let g = neuron_gradient(
                    &w,
                    &prompt,
                    &obj,
                    layer,
                    neuron,
                    v,
                    &sel,
                    &InterventionSpec::none(),
                )
                .unwrap();
                let h = 1e-3;
                let fd = (clamped(&w, &prompt, &obj, layer, neuron, v + h, &sel)
                    - clamped(&w, &prompt, &obj, layer, neuron, v - h, &sel))
                    / (2.0 * h);
                assert!(
                    (g - fd).abs() <= 1e-4 * fd.abs().max(1e-8),
                    "{kind:?} layer {layer}: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn probe_value_matches_clamped_forward() {
        let w = model(4);
        let prompt = TokenSeq::new(vec![2, 3, 4]);
        let obj = Objective::new(TokenSeq::new(vec![5, 6]), ObjectiveKind::MeanLogProb);
        let none = InterventionSpec::none();
        let mut probe = ClampProbe::new(&w, &prompt, &obj, &none, 1, &[2, 3]).unwrap();
        let (v, _) = probe.eval(4, &[0.7, 0.7]).unwrap();
        let direct = clamped(
            &w,
            &prompt,
            &obj,
            1,
            4,
            0.7,
            &PositionSelector::explicit([2, 3]),
        );
        assert!((v - direct).abs() < 1e-12);
        let nat = probe.natural(4);
        let (v_nat, _) = probe.eval(4, &nat).unwrap();
        let base = objective_value(&w, &prompt, &obj, &none).unwrap();
        assert!((v_nat - base).abs() < 1e-12);
    }
}
