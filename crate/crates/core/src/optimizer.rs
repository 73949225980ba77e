//! Process objectives over predictions and projected gradient descent
//! through the shadow model.
//!
//! The search runs on parameters z-scored with the training statistics;
//! iterates are clamped onto the bounds mapped into that space.

use std::ops::ControlFlow;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ParameterVector, ProgramTemplate, CHANNELS, FORCE_CHANNEL};
use crate::net::{logistic, soft_peak, softplus, HeadGradient, Mode, Prediction, ShadowModel, PEAK_FORCE_TAU};

/// Unit normalization of each objective so equal weights are commensurate.
pub const TIME_UNIT: f64 = 1.0;
pub const PATH_UNIT: f64 = 100.0;
pub const SUCCESS_UNIT: f64 = 1.0;
pub const FORCE_UNIT: f64 = 1.0;

/// Added inside every segment norm so the path length stays differentiable.
pub const PATH_EPS: f64 = 1e-9;
pub const SUCCESS_EPS: f64 = 1e-9;

/// Iteration predictions keep at most this many trajectory samples.
pub const HISTORY_SAMPLES: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveTerm {
    pub enabled: bool,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl ObjectiveTerm {
    pub fn on(weight: f64) -> Self {
        ObjectiveTerm { enabled: true, weight }
    }

    pub fn off() -> Self {
        ObjectiveTerm { enabled: false, weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ForceTerm {
    pub enabled: bool,
    #[serde(default = "one")]
    pub weight: f64,
    /// Force threshold F_max, N.
    #[serde(default)]
    pub f_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub cycle_time: ObjectiveTerm,
    pub path_length: ObjectiveTerm,
    pub success: ObjectiveTerm,
    pub force_threshold: ForceTerm,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            cycle_time: ObjectiveTerm::on(1.0),
            path_length: ObjectiveTerm::off(),
            success: ObjectiveTerm::on(1.0),
            force_threshold: ForceTerm { enabled: false, weight: 1.0, f_max: None },
        }
    }
}

impl ObjectiveSpec {
    /// Cycle time, success and a force threshold, all weighted 1.
    pub fn time_success_force(f_max: f64) -> Self {
        ObjectiveSpec {
            force_threshold: ForceTerm { enabled: true, weight: 1.0, f_max: Some(f_max) },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let terms = [
            ("cycle_time", self.cycle_time.enabled, self.cycle_time.weight),
            ("path_length", self.path_length.enabled, self.path_length.weight),
            ("success", self.success.enabled, self.success.weight),
            ("force_threshold", self.force_threshold.enabled, self.force_threshold.weight),
        ];
        if !terms.iter().any(|t| t.1) {
            return Err(CoreError::validation("objective.none_enabled", "enable at least one objective"));
        }
        for (name, enabled, weight) in terms {
            if !weight.is_finite() || weight < 0.0 || (enabled && weight <= 0.0) {
                return Err(CoreError::validation_at(
                    "objective.weight_invalid",
                    format!("weight of `{name}` must be positive when enabled and never negative"),
                    format!("{name}.weight"),
                ));
            }
        }
        if self.force_threshold.enabled {
            match self.force_threshold.f_max {
                Some(f) if f.is_finite() && f > 0.0 => {}
                Some(_) => {
                    return Err(CoreError::validation_at(
                        "objective.force_threshold_invalid",
                        "f_max must be a positive number of newtons",
                        "force_threshold.f_max",
                    ))
                }
                None => {
                    return Err(CoreError::validation_at(
                        "objective.force_threshold_missing",
                        "the force objective needs f_max",
                        "force_threshold.f_max",
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Per-objective values in their own units (s, mm, nats, N) and the
/// weighted, unit-normalized total. Disabled objectives are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ObjectiveValues {
    pub cycle_time: Option<f64>,
    pub path_length: Option<f64>,
    pub success: Option<f64>,
    pub force_threshold: Option<f64>,
    pub total: f64,
}

/// Positions, forces, cycle time and success probability an objective is
/// evaluated on; shared by predictions and simulator ground truth.
pub struct Outcome {
    pub positions: Vec<[f64; 3]>,
    pub forces: Vec<f64>,
    pub cycle_time: f64,
    pub success_probability: f64,
}

impl Outcome {
    pub fn from_prediction(p: &Prediction) -> Self {
        Outcome {
            positions: p.trajectory.samples.iter().map(|s| s.p).collect(),
            forces: p.trajectory.forces().collect(),
            cycle_time: p.cycle_time,
            success_probability: p.success_probability,
        }
    }

    /// An executed trajectory with its success flag as probability 0 or 1.
    pub fn from_trajectory(t: &crate::model::Trajectory) -> Self {
        Outcome {
            positions: t.samples.iter().map(|s| s.p).collect(),
            forces: t.samples.iter().map(|s| s.f).collect(),
            cycle_time: t.cycle_time(),
            success_probability: if t.success { 1.0 } else { 0.0 },
        }
    }
}

/// Smoothed path length and its gradient with respect to every position.
fn smooth_path(positions: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let mut total = 0.0;
    let mut grad = vec![[0.0; 3]; positions.len()];
    for k in 1..positions.len() {
        let d = [0, 1, 2].map(|c| positions[k][c] - positions[k - 1][c]);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + PATH_EPS).sqrt();
        total += norm;
        for c in 0..3 {
            grad[k][c] += d[c] / norm;
            grad[k - 1][c] -= d[c] / norm;
        }
    }
    (total, grad)
}

pub fn objective_value(pred: &Prediction, spec: &ObjectiveSpec) -> ObjectiveValues {
    evaluate_outcome(&Outcome::from_prediction(pred), spec)
}

pub fn evaluate_outcome(o: &Outcome, spec: &ObjectiveSpec) -> ObjectiveValues {
    let mut total = 0.0;
    let cycle_time = spec.cycle_time.enabled.then(|| {
        total += spec.cycle_time.weight * o.cycle_time / TIME_UNIT;
        o.cycle_time
    });
    let path_length = spec.path_length.enabled.then(|| {
        let j = smooth_path(&o.positions).0;
        total += spec.path_length.weight * j / PATH_UNIT;
        j
    });
    let success = spec.success.enabled.then(|| {
        let j = -(o.success_probability + SUCCESS_EPS).ln();
        total += spec.success.weight * j / SUCCESS_UNIT;
        j
    });
    let force_threshold = spec.force_threshold.enabled.then(|| {
        let f_max = spec.force_threshold.f_max.unwrap_or(f64::INFINITY);
        let j = softplus((soft_peak(&o.forces, PEAK_FORCE_TAU).0 - f_max) / FORCE_UNIT);
        total += spec.force_threshold.weight * j;
        j
    });
    ObjectiveValues { cycle_time, path_length, success, force_threshold, total }
}

/// Objective values and the gradient of the total with respect to the
/// denormalized prediction heads.
pub fn objective_gradient(model: &ShadowModel, pred: &Prediction, spec: &ObjectiveSpec) -> (ObjectiveValues, HeadGradient) {
    let o = Outcome::from_prediction(pred);
    let values = evaluate_outcome(&o, spec);
    let mut g = HeadGradient::zeros(&model.architecture);
    if spec.cycle_time.enabled {
        g.cycle_time = spec.cycle_time.weight / TIME_UNIT;
    }
    if spec.path_length.enabled {
        let (_, dp) = smooth_path(&o.positions);
        let w = spec.path_length.weight / PATH_UNIT;
        for (t, d) in dp.iter().enumerate() {
            for c in 0..3 {
                g.trajectory[t * CHANNELS + c] += w * d[c];
            }
        }
    }
    if spec.success.enabled {
        let p = logistic(pred.success_logit);
        g.success_logit = -spec.success.weight / SUCCESS_UNIT * p * (1.0 - p) / (p + SUCCESS_EPS);
    }
    if spec.force_threshold.enabled {
        let f_max = spec.force_threshold.f_max.unwrap_or(f64::INFINITY);
        let (lse, weights) = soft_peak(&o.forces, PEAK_FORCE_TAU);
        let outer = spec.force_threshold.weight * logistic((lse - f_max) / FORCE_UNIT) / FORCE_UNIT;
        for (t, w) in weights.iter().enumerate() {
            g.trajectory[t * CHANNELS + FORCE_CHANNEL] += outer * w;
        }
    }
    (values, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerHyperparams {
    /// Step size in z-scored parameter space.
    pub step_size: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for OptimizerHyperparams {
    fn default() -> Self {
        OptimizerHyperparams { step_size: 0.05, iterations: 100, seed: 0 }
    }
}

impl OptimizerHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(CoreError::validation_at(
                "optimizer.hyperparams_invalid",
                "step_size must be a finite non-negative number",
                "step_size",
            ));
        }
        if self.iterations == 0 {
            return Err(CoreError::validation_at("optimizer.hyperparams_invalid", "iterations must be >= 1", "iterations"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OptimizationIteration {
    pub index: usize,
    pub x: ParameterVector,
    /// Trajectory downsampled to at most 128 samples.
    pub prediction: Prediction,
    pub objectives: ObjectiveValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OptimizationRun {
    pub id: String,
    pub model_id: String,
    pub spec: ObjectiveSpec,
    pub hp: OptimizerHyperparams,
    pub x_init: ParameterVector,
    /// Iteration 0 is `x_init`, followed by one entry per update.
    pub iterations: Vec<OptimizationIteration>,
    pub best_index: usize,
    pub x_best: ParameterVector,
    /// Full-length prediction at `x_best`.
    pub best_prediction: Prediction,
}

/// Projected gradient descent on a box: `u <- clamp(u - step * grad, lo, hi)`.
/// `f` sees every iterate, `iterations + 1` in total, and returns the
/// gradient there (`None` stops early).
pub fn descend(
    u0: &[f64],
    bounds: &[(f64, f64)],
    step: f64,
    iterations: usize,
    mut f: impl FnMut(usize, &[f64]) -> Result<Option<Vec<f64>>>,
) -> Result<()> {
    let mut u = u0.to_vec();
    for i in 0..=iterations {
        let grad = f(i, &u)?;
        if i == iterations {
            break;
        }
        let Some(grad) = grad else { break };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFiniteGradient { iteration: i });
        }
        for ((v, g), &(lo, hi)) in u.iter_mut().zip(&grad).zip(bounds) {
            *v = (*v - step * g).clamp(lo, hi);
        }
    }
    Ok(())
}

/// The optimizer's search space: parameters z-scored with the training
/// dataset statistics stored in the model.
pub struct SearchSpace<'a> {
    model: &'a ShadowModel,
}

impl<'a> SearchSpace<'a> {
    pub fn new(model: &'a ShadowModel) -> Self {
        SearchSpace { model }
    }

    fn stats(&self) -> impl Iterator<Item = (&crate::model::ParameterSpec, &crate::model::ChannelStats)> {
        self.model.parameter_specs.iter().zip(&self.model.norm_stats.parameters)
    }

    pub fn to_z(&self, x: &ParameterVector) -> Vec<f64> {
        self.stats().map(|(s, c)| c.normalize(x.0[&s.name])).collect()
    }

    /// Inverse of `to_z`, clamped onto the parameter bounds.
    pub fn from_z(&self, z: &[f64]) -> ParameterVector {
        self.stats().zip(z).map(|((s, c), &v)| (s.name.clone(), s.clamp(c.denormalize(v)))).collect()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.stats().map(|(s, c)| (c.normalize(s.lower_bound), c.normalize(s.upper_bound))).collect()
    }

    /// Chain rule from raw-unit gradients to z-space.
    pub fn gradient(&self, raw: &[f64]) -> Vec<f64> {
        self.stats().zip(raw).map(|((_, c), g)| g * c.scale()).collect()
    }
}

/// Snapshot reported after every evaluated iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct IterationProgress {
    pub iteration: usize,
    pub iterations: usize,
    pub total: f64,
    pub best_total: f64,
}

pub fn optimize(
    id: &str,
    model: &ShadowModel,
    x_init: &ParameterVector,
    spec: &ObjectiveSpec,
    hp: &OptimizerHyperparams,
    mut observer: impl FnMut(&IterationProgress) -> ControlFlow<()>,
) -> Result<OptimizationRun> {
    if !model.is_trained() {
        return Err(CoreError::validation("model.untrained", format!("model `{}` has not been trained", model.id)));
    }
    spec.validate()?;
    hp.validate()?;
    model.template().check(x_init)?;
    let mut iterations: Vec<OptimizationIteration> = Vec::with_capacity(hp.iterations + 1);
    let mut best: Option<(usize, f64, Prediction)> = None;
    let space = SearchSpace::new(model);
    descend(&space.to_z(x_init), &space.bounds(), hp.step_size, hp.iterations, |i, z| {
        let x = if i == 0 { x_init.clone() } else { space.from_z(z) };
        let (prediction, cache) = model.forward(&x, Mode::Eval)?;
        let (objectives, upstream) = objective_gradient(model, &prediction, spec);
        if !objectives.total.is_finite() {
            return Err(CoreError::NonFiniteGradient { iteration: i });
        }
        if best.as_ref().is_none_or(|b| objectives.total < b.1) {
            best = Some((i, objectives.total, prediction.clone()));
        }
        let progress = IterationProgress {
            iteration: i,
            iterations: hp.iterations,
            total: objectives.total,
            best_total: best.as_ref().map_or(objectives.total, |b| b.1),
        };
        let grad = if i < hp.iterations {
            Some(space.gradient(&model.backward(&x, &cache, &upstream)?.input))
        } else {
            None
        };
        let mut stored = prediction;
        stored.trajectory = stored.trajectory.downsampled(HISTORY_SAMPLES);
        iterations.push(OptimizationIteration { index: i, x, prediction: stored, objectives });
        if observer(&progress).is_break() {
            return Err(CoreError::Cancelled { completed: i });
        }
        Ok(grad)
    })?;
    let (best_index, _, best_prediction) = best.expect("at least one iterate");
    Ok(OptimizationRun {
        id: id.to_string(),
        model_id: model.id.clone(),
        spec: spec.clone(),
        hp: hp.clone(),
        x_init: x_init.clone(),
        x_best: iterations[best_index].x.clone(),
        iterations,
        best_index,
        best_prediction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WhatIf {
    pub x: ParameterVector,
    pub prediction: Prediction,
    pub objectives: ObjectiveValues,
}

pub fn what_if(model: &ShadowModel, x: &ParameterVector, spec: &ObjectiveSpec) -> Result<WhatIf> {
    spec.validate()?;
    let prediction = model.predict(x)?;
    let objectives = objective_value(&prediction, spec);
    Ok(WhatIf { x: x.clone(), prediction, objectives })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ParameterComparison {
    pub name: String,
    pub unit: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    pub delta_relative_to_range: f64,
}

pub fn compare_parameterizations(
    x_init: &ParameterVector,
    x_best: &ParameterVector,
    template: &ProgramTemplate,
) -> Result<Vec<ParameterComparison>> {
    template.check(x_init)?;
    template.check(x_best)?;
    Ok(template
        .parameter_specs
        .iter()
        .map(|s| {
            let before = x_init.0[&s.name];
            let after = x_best.0[&s.name];
            ParameterComparison {
                name: s.name.clone(),
                unit: s.unit.clone(),
                before,
                after,
                delta: after - before,
                delta_relative_to_range: (after - before) / s.range(),
            }
        })
        .collect())
}
