//! Epsilon-rule layer-wise relevance propagation from a scalar head back to
//! the program parameters.
//!
//! The output denormalization is folded into the last affine layer, so the
//! propagated scalar is in physical units (N for the peak force, s for the
//! cycle time). Relevance passes tanh unchanged and bias shares are dropped;
//! whatever they absorbed shows up in `conservation_residual`.

use indexmap::IndexMap;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ParameterVector, CHANNELS, FORCE_CHANNEL};
use crate::net::{layer_inputs_eval, soft_peak, ShadowModel, PEAK_FORCE_TAU};

pub const LRP_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TargetHead {
    PeakForce,
    CycleTime,
    SuccessLogit,
}

impl TargetHead {
    pub const ALL: [TargetHead; 3] = [TargetHead::PeakForce, TargetHead::CycleTime, TargetHead::SuccessLogit];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RelevanceReport {
    pub target_head: TargetHead,
    pub probe_x: ParameterVector,
    pub relevances: IndexMap<String, f64>,
    pub output_value: f64,
    pub conservation_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RelevanceBar {
    pub parameter: String,
    pub relevance: f64,
    /// `|relevance|` divided by the largest `|relevance|` of the head.
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HeadRelevance {
    pub target_head: TargetHead,
    pub output_value: f64,
    pub conservation_residual: f64,
    pub bars: Vec<RelevanceBar>,
}

/// Relevance of every parameter for `head` at `x`.
pub fn relevance(model: &ShadowModel, x: &ParameterVector, head: TargetHead) -> Result<RelevanceReport> {
    if !model.is_trained() {
        return Err(CoreError::validation("model.untrained", format!("model `{}` has not been trained", model.id)));
    }
    model.template().check(x)?;
    let unit = model.normalize_input(x);
    let (input_relevance, output_value) = propagate(model, &unit, head, LRP_EPSILON);
    let relevances: IndexMap<String, f64> = model
        .parameter_specs
        .iter()
        .zip(&input_relevance)
        .map(|(s, &r)| (s.name.clone(), r))
        .collect();
    let total: f64 = input_relevance.iter().sum();
    Ok(RelevanceReport {
        target_head: head,
        probe_x: x.clone(),
        relevances,
        output_value,
        conservation_residual: (total - output_value).abs(),
    })
}

/// Input relevances and the head value for a `[0, 1]`-scaled input.
pub fn propagate(model: &ShadowModel, unit_input: &[f64], head: TargetHead, epsilon: f64) -> (Vec<f64>, f64) {
    let (inputs, outputs) = layer_inputs_eval(model, unit_input);
    let arch = &model.architecture;
    let stats = &model.norm_stats;
    let last = model.layers.len() - 1;
    let out_layer = &model.layers[last];

    // Rows of the head in the output layer with their affine scale and shift.
    let rows: Vec<(usize, f64, f64)> = match head {
        TargetHead::PeakForce => (0..arch.pad_length)
            .map(|t| {
                let j = t * CHANNELS + FORCE_CHANNEL;
                (j, stats.trajectory[j].scale(), stats.trajectory[j].mean)
            })
            .collect(),
        TargetHead::CycleTime => {
            vec![(arch.cycle_time_index(), stats.cycle_time.scale(), stats.cycle_time.mean)]
        }
        TargetHead::SuccessLogit => vec![(arch.logit_index(), 1.0, 0.0)],
    };
    let values: Vec<f64> = rows.iter().map(|&(j, scale, shift)| shift + scale * outputs[j]).collect();
    let (output_value, seeds) = match head {
        TargetHead::PeakForce => {
            let (lse, weights) = soft_peak(&values, PEAK_FORCE_TAU);
            (lse, weights.into_iter().map(|w| w * lse).collect::<Vec<_>>())
        }
        _ => (values[0], vec![values[0]]),
    };

    let a = &inputs[last];
    let mut relevance = vec![0.0; a.len()];
    for ((&(j, scale, _), &z), &r) in rows.iter().zip(&values).zip(&seeds) {
        let denom = stabilize(z, epsilon);
        for (i, ai) in a.iter().enumerate() {
            relevance[i] += ai * scale * out_layer.weights[[j, i]] / denom * r;
        }
    }
    for l in (0..last).rev() {
        let layer = &model.layers[l];
        let a = &inputs[l];
        let mut next = vec![0.0; a.len()];
        for (j, r) in relevance.iter().enumerate() {
            let z: f64 = layer.bias[j] + a.iter().enumerate().map(|(i, ai)| ai * layer.weights[[j, i]]).sum::<f64>();
            let denom = stabilize(z, epsilon);
            for (i, ai) in a.iter().enumerate() {
                next[i] += ai * layer.weights[[j, i]] / denom * r;
            }
        }
        relevance = next;
    }
    (relevance, output_value)
}

fn stabilize(z: f64, epsilon: f64) -> f64 {
    if z >= 0.0 {
        z + epsilon
    } else {
        z - epsilon
    }
}

/// Relevance bars for every head, in template parameter order.
pub fn relevance_bars(model: &ShadowModel, x: &ParameterVector) -> Result<Vec<HeadRelevance>> {
    TargetHead::ALL
        .iter()
        .map(|&head| {
            let report = relevance(model, x, head)?;
            Ok(HeadRelevance {
                target_head: head,
                output_value: report.output_value,
                conservation_residual: report.conservation_residual,
                bars: bars(&report.relevances),
            })
        })
        .collect()
}

/// Normalizes magnitudes by the largest one; all-zero relevances stay zero.
pub fn bars(relevances: &IndexMap<String, f64>) -> Vec<RelevanceBar> {
    let max = relevances.values().fold(0.0_f64, |m, r| m.max(r.abs()));
    relevances
        .iter()
        .map(|(name, &r)| RelevanceBar {
            parameter: name.clone(),
            relevance: r,
            normalized: if max > 0.0 { r.abs() / max } else { 0.0 },
        })
        .collect()
}
