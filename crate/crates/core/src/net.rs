//! The shadow model: a tanh MLP mapping program parameters to a padded
//! trajectory, a cycle time and a success logit.
//!
//! Inputs are scaled onto `[0, 1]` with the template bounds; outputs are
//! z-scored per padded value with the dataset statistics. The output
//! vector is laid out as `[step0: x y z f, step1: ..., cycle_time, logit]`.
//!
//! Dropout acts on hidden activations that feed another hidden layer; the
//! last hidden layer reaches the heads undropped.

use std::ops::ControlFlow;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{
    check_parameters, skill_signature, Dataset, NormStats, ParameterSpec, ParameterVector, ProgramTemplate,
    Sample, CHANNELS, FORCE_CHANNEL,
};
use crate::sim::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct NetArchitecture {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Trajectory head length in samples; the head emits `4 * pad_length` values.
    pub pad_length: usize,
}

impl NetArchitecture {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, dropout_rate: f64, pad_length: usize) -> Self {
        NetArchitecture { input_dim, hidden_layers, activation: Activation::Tanh, dropout_rate, pad_length }
    }

    pub fn trajectory_dim(&self) -> usize {
        self.pad_length * CHANNELS
    }

    pub fn output_dim(&self) -> usize {
        self.trajectory_dim() + 2
    }

    pub fn cycle_time_index(&self) -> usize {
        self.trajectory_dim()
    }

    pub fn logit_index(&self) -> usize {
        self.trajectory_dim() + 1
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_layers);
        widths.push(self.output_dim());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.pad_length == 0 {
            return Err(CoreError::validation("model.architecture_invalid", "input_dim and pad_length must be >= 1"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(CoreError::validation_at(
                "model.architecture_invalid",
                "hidden layer widths must be >= 1",
                "hidden_layers",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::validation_at(
                "model.architecture_invalid",
                "dropout_rate must lie in [0, 1)",
                "dropout_rate",
            ));
        }
        Ok(())
    }
}

mod nested {
    use ndarray::{Array1, Array2};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
            let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
            rows.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != cols) {
                return Err(serde::de::Error::custom("ragged weight matrix"));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(serde::de::Error::custom)
        }
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().expect("contiguous").serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
            Ok(Array1::from(Vec::<f64>::deserialize(d)?))
        }
    }
}

/// Affine layer `z = W a + b` with `W` stored `(fan_out, fan_in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DenseLayer {
    #[serde(with = "nested::matrix")]
    #[schemars(with = "Vec<Vec<f64>>")]
    pub weights: Array2<f64>,
    #[serde(with = "nested::vector")]
    #[schemars(with = "Vec<f64>")]
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer { weights: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    FromScratch,
    /// A base model reused unchanged.
    Base { base_id: String },
    Finetuned { base_id: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ValidationMetrics {
    /// Position RMSE over x, y, z and all padded steps, mm.
    pub traj_rmse: f64,
    pub force_rmse: f64,
    pub time_mae: f64,
    pub success_accuracy: f64,
}

/// Held-out label and prediction summaries for one validation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HeldOutPair {
    pub record_index: usize,
    pub cycle_time_label: f64,
    pub cycle_time_pred: f64,
    pub success_label: bool,
    pub success_probability: f64,
    pub peak_force_label: f64,
    pub peak_force_pred: f64,
    pub path_length_label: f64,
    pub path_length_pred: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainingLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    #[serde(default)]
    pub metrics: Option<ValidationMetrics>,
    #[serde(default)]
    pub held_out: Vec<HeldOutPair>,
    /// Set when training stopped on a non-finite loss.
    #[serde(default)]
    pub aborted: Option<String>,
}

impl TrainingLog {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ShadowModel {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub program_id: String,
    pub skill_signature: String,
    pub parameter_specs: Vec<ParameterSpec>,
    pub architecture: NetArchitecture,
    pub layers: Vec<DenseLayer>,
    pub norm_stats: NormStats,
    /// Sampling period of the predicted trajectory.
    pub dt: f64,
    pub provenance: Provenance,
    #[serde(default)]
    pub training_log: TrainingLog,
}

/// Predicted trajectory; forces are raw model outputs and may dip below zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PredictedTrajectory {
    pub dt: f64,
    pub samples: Vec<Sample>,
}

impl PredictedTrajectory {
    pub fn forces(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.f)
    }

    pub fn path_length(&self) -> f64 {
        crate::model::path_length(&self.samples)
    }

    /// Every `stride`-th sample plus the last one.
    pub fn downsampled(&self, max_samples: usize) -> PredictedTrajectory {
        let n = self.samples.len();
        if n <= max_samples || max_samples < 2 {
            return self.clone();
        }
        let stride = n.div_ceil(max_samples - 1);
        let mut samples: Vec<Sample> = self.samples.iter().step_by(stride).copied().collect();
        if (n - 1) % stride != 0 {
            samples.push(self.samples[n - 1]);
        }
        PredictedTrajectory { dt: self.dt * stride as f64, samples }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Prediction {
    pub trajectory: PredictedTrajectory,
    pub cycle_time: f64,
    pub success_logit: f64,
    pub success_probability: f64,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Temperature of the soft peak-force maximum, N.
pub const PEAK_FORCE_TAU: f64 = 1.0;

/// Log-sum-exp soft maximum `tau * ln(sum exp(f / tau))` and its softmax
/// weights, which are also its partial derivatives.
pub fn soft_peak(values: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - m) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (m + tau * sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from `seed`.
    Train { seed: u64 },
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input_raw: Vec<f64>,
    fingerprint: u64,
    batch: BatchCache,
    outputs: Array2<f64>,
}

impl ForwardCache {
    /// Network outputs in normalized units.
    pub fn outputs(&self) -> &[f64] {
        self.outputs.as_slice().expect("contiguous")
    }
}

#[derive(Clone, Debug)]
struct BatchCache {
    /// Input of every affine layer (after dropout for hidden layers).
    layer_inputs: Vec<Array2<f64>>,
    /// tanh outputs of hidden layers before dropout.
    hidden: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

/// Upstream gradient of a scalar loss with respect to the denormalized heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    /// `d loss / d value` for each padded `[x, y, z, f]` entry.
    pub trajectory: Vec<f64>,
    pub cycle_time: f64,
    pub success_logit: f64,
}

impl HeadGradient {
    pub fn zeros(arch: &NetArchitecture) -> Self {
        HeadGradient { trajectory: vec![0.0; arch.trajectory_dim()], cycle_time: 0.0, success_logit: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    /// Gradient with respect to the `[0, 1]`-scaled input.
    pub input_normalized: Vec<f64>,
    /// Gradient with respect to the raw parameter values.
    pub input: Vec<f64>,
}

impl ShadowModel {
    /// Untrained model: Glorot-uniform hidden layers, zero output layer.
    pub fn initialized(
        id: impl Into<String>,
        template: &ProgramTemplate,
        architecture: NetArchitecture,
        norm_stats: NormStats,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        architecture.validate()?;
        check_dims(template.dim(), &architecture, &norm_stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = architecture.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                if l == last {
                    DenseLayer::zeros(fan_in, fan_out)
                } else {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    DenseLayer {
                        weights: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit)),
                        bias: Array1::zeros(fan_out),
                    }
                }
            })
            .collect();
        Ok(ShadowModel {
            id: id.into(),
            name: String::new(),
            program_id: template.id.clone(),
            skill_signature: template.skill_signature(),
            parameter_specs: template.parameter_specs.clone(),
            architecture,
            layers,
            norm_stats,
            dt,
            provenance: Provenance::FromScratch,
            training_log: TrainingLog::default(),
        })
    }

    /// Model with every weight and bias drawn from `N(0, scale^2 / fan_in)`
    /// and `N(0, bias_scale^2)`; used by verification tests.
    pub fn random(
        template: &ProgramTemplate,
        architecture: NetArchitecture,
        norm_stats: NormStats,
        seed: u64,
        bias_scale: f64,
    ) -> Result<Self> {
        let mut model = Self::initialized("random", template, architecture, norm_stats, 0.01, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 99));
        for layer in &mut model.layers {
            let std = (1.0 / layer.fan_in() as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std);
            layer.bias.mapv_inplace(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * bias_scale);
        }
        Ok(model)
    }

    pub fn template(&self) -> ProgramTemplate {
        let mut skills: Vec<_> = Vec::new();
        for s in &self.parameter_specs {
            if !skills.contains(&s.skill) {
                skills.push(s.skill);
            }
        }
        ProgramTemplate { id: self.program_id.clone(), skill_sequence: skills, parameter_specs: self.parameter_specs.clone() }
    }

    pub fn pad_length(&self) -> usize {
        self.architecture.pad_length
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// A model counts as trained once it ran at least one epoch or was
    /// derived from a base model.
    pub fn is_trained(&self) -> bool {
        self.training_log.epochs() > 0 || !matches!(self.provenance, Provenance::FromScratch)
    }

    /// Checks the weight shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        check_dims(self.parameter_specs.len(), &self.architecture, &self.norm_stats)?;
        let dims = self.architecture.layer_dims();
        if dims.len() != self.layers.len()
            || dims
                .iter()
                .zip(&self.layers)
                .any(|(&(i, o), l)| l.fan_in() != i || l.fan_out() != o || l.bias.len() != o)
        {
            return Err(CoreError::validation("model.shape_mismatch", "weight shapes do not match the architecture"));
        }
        let expected = skill_signature(&self.template().skill_sequence, &self.parameter_specs);
        if expected != self.skill_signature {
            return Err(CoreError::validation("model.invalid", "skill signature does not match the parameter specs"));
        }
        Ok(())
    }

    pub fn normalize_input(&self, x: &ParameterVector) -> Vec<f64> {
        self.parameter_specs.iter().map(|s| s.to_unit(x.0[&s.name])).collect()
    }

    pub fn denormalize_input(&self, unit: &[f64]) -> ParameterVector {
        self.parameter_specs
            .iter()
            .zip(unit)
            .map(|(s, &u)| (s.name.clone(), s.from_unit(u)))
            .collect()
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Forward pass for one parameter vector.
    pub fn forward(&self, x: &ParameterVector, mode: Mode) -> Result<(Prediction, ForwardCache)> {
        check_parameters(&self.parameter_specs, x)?;
        let input = self.normalize_input(x);
        let xin = Array2::from_shape_vec((1, input.len()), input).expect("shape");
        let (outputs, batch) = self.forward_batch(xin.view(), mode);
        let prediction = self.prediction_from_outputs(outputs.row(0).as_slice().expect("contiguous"));
        let cache = ForwardCache { input_raw: x.values(), fingerprint: self.fingerprint(), batch, outputs };
        Ok((prediction, cache))
    }

    /// Eval-mode prediction.
    pub fn predict(&self, x: &ParameterVector) -> Result<Prediction> {
        if self.norm_stats.trajectory.is_empty() {
            return Err(CoreError::Invariant("model has no normalization statistics".into()));
        }
        self.forward(x, Mode::Eval).map(|(p, _)| p)
    }

    /// Reverse-mode gradients of a scalar loss given its gradient on the heads.
    pub fn backward(&self, x: &ParameterVector, cache: &ForwardCache, upstream: &HeadGradient) -> Result<Gradients> {
        if cache.input_raw != x.values() || cache.fingerprint != self.fingerprint() {
            return Err(CoreError::Invariant("forward cache does not belong to this model and input".into()));
        }
        let arch = &self.architecture;
        if upstream.trajectory.len() != arch.trajectory_dim() {
            return Err(CoreError::Invariant("upstream gradient has the wrong trajectory length".into()));
        }
        let mut d_out = Array2::zeros((1, arch.output_dim()));
        for (j, g) in upstream.trajectory.iter().enumerate() {
            d_out[[0, j]] = g * self.norm_stats.trajectory[j].scale();
        }
        d_out[[0, arch.cycle_time_index()]] = upstream.cycle_time * self.norm_stats.cycle_time.scale();
        d_out[[0, arch.logit_index()]] = upstream.success_logit;
        let (layers, d_in) = self.backward_batch(&cache.batch, d_out);
        let input_normalized = d_in.row(0).to_vec();
        let input = input_normalized
            .iter()
            .zip(&self.parameter_specs)
            .map(|(g, s)| g / s.range())
            .collect();
        Ok(Gradients { layers, input_normalized, input })
    }

    pub fn prediction_from_outputs(&self, out: &[f64]) -> Prediction {
        let arch = &self.architecture;
        let stats = &self.norm_stats;
        let samples = (0..arch.pad_length)
            .map(|t| {
                let v = |c: usize| stats.trajectory[t * CHANNELS + c].denormalize(out[t * CHANNELS + c]);
                Sample { p: [v(0), v(1), v(2)], f: v(FORCE_CHANNEL) }
            })
            .collect();
        let logit = out[arch.logit_index()];
        Prediction {
            trajectory: PredictedTrajectory { dt: self.dt, samples },
            cycle_time: stats.cycle_time.denormalize(out[arch.cycle_time_index()]),
            success_logit: logit,
            success_probability: logistic(logit),
        }
    }

    fn forward_batch(&self, x: ArrayView2<f64>, mode: Mode) -> (Array2<f64>, BatchCache) {
        let mut rng = match mode {
            Mode::Train { seed } if self.architecture.dropout_rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let keep = 1.0 - self.architecture.dropout_rate;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            layer_inputs.push(a);
            if l == last {
                a = z;
            } else {
                z.mapv_inplace(f64::tanh);
                match rng.as_mut().filter(|_| l + 1 < last) {
                    Some(rng) => {
                        let mask = Array2::from_shape_fn(z.raw_dim(), |_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        a = &z * &mask;
                        masks.push(Some(mask));
                    }
                    None => {
                        a = z.clone();
                        masks.push(None);
                    }
                }
                hidden.push(z);
            }
        }
        (a, BatchCache { layer_inputs, hidden, masks })
    }

    fn backward_batch(&self, cache: &BatchCache, d_out: Array2<f64>) -> (Vec<LayerGradient>, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_in = &cache.layer_inputs[l];
            let weights = delta.t().dot(a_in);
            let bias = delta.sum_axis(Axis(0));
            grads.push(LayerGradient { weights, bias });
            let mut d_a = delta.dot(&layer.weights);
            if l > 0 {
                if let Some(mask) = &cache.masks[l - 1] {
                    d_a *= mask;
                }
                let h = &cache.hidden[l - 1];
                d_a.zip_mut_with(h, |d, &t| *d *= 1.0 - t * t);
            }
            delta = d_a;
        }
        grads.reverse();
        (grads, delta)
    }
}

fn check_dims(input_dim: usize, arch: &NetArchitecture, stats: &NormStats) -> Result<()> {
    if arch.input_dim != input_dim {
        return Err(CoreError::validation(
            "model.architecture_mismatch",
            format!("architecture expects {} inputs, program has {input_dim} parameters", arch.input_dim),
        ));
    }
    if stats.trajectory.len() != arch.trajectory_dim() {
        return Err(CoreError::validation(
            "model.architecture_mismatch",
            format!(
                "normalization covers {} trajectory values, architecture emits {}",
                stats.trajectory.len(),
                arch.trajectory_dim()
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct TrainHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Network size: widths of the hidden layers.
    pub hidden_layers: Vec<usize>,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            val_fraction: 0.2,
            dropout_rate: 0.1,
            weight_decay: 0.0,
            seed: 0,
            hidden_layers: vec![64, 64],
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(CoreError::validation_at("training.hyperparams_invalid", msg.to_string(), field));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "learning_rate must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "batch_size must be >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", "val_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "dropout_rate must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "weight_decay must be >= 0");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden_layers", "hidden layer widths must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum TrainInit {
    Scratch,
    /// Reuse a base model's weights and normalization, unchanged.
    AsIs(ShadowModel),
    /// Continue training a base model on the dataset.
    Finetune(ShadowModel),
}

/// Snapshot reported after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EpochProgress {
    pub epoch: usize,
    pub epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Dataset arranged as normalized input and target matrices.
struct Tensors {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    success: Vec<f64>,
}

fn tensors(dataset: &Dataset, model: &ShadowModel) -> Tensors {
    let arch = &model.architecture;
    let n = dataset.len();
    let stats = &model.norm_stats;
    let mut inputs = Array2::zeros((n, arch.input_dim));
    let mut targets = Array2::zeros((n, arch.trajectory_dim() + 1));
    let mut success = Vec::with_capacity(n);
    for (i, r) in dataset.records.iter().enumerate() {
        for (k, v) in model.normalize_input(&r.parameters).into_iter().enumerate() {
            inputs[[i, k]] = v;
        }
        for (j, v) in r.trajectory.to_channels(arch.pad_length).into_iter().enumerate() {
            targets[[i, j]] = stats.trajectory[j].normalize(v);
        }
        targets[[i, arch.trajectory_dim()]] = stats.cycle_time.normalize(r.trajectory.cycle_time());
        success.push(if r.trajectory.success { 1.0 } else { 0.0 });
    }
    Tensors { inputs, targets, success }
}

/// Data loss (trajectory MSE + cycle-time MSE + success BCE) averaged over
/// the rows, and its gradient with respect to the outputs.
fn loss_and_grad(arch: &NetArchitecture, out: &Array2<f64>, targets: &Array2<f64>, success: &[f64]) -> (f64, Array2<f64>) {
    let b = out.nrows() as f64;
    let td = arch.trajectory_dim();
    let mut grad = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for (i, (row, target)) in out.outer_iter().zip(targets.outer_iter()).enumerate() {
        let mut traj = 0.0;
        for j in 0..td {
            let e = row[j] - target[j];
            traj += e * e;
            grad[[i, j]] = 2.0 * e / (td as f64 * b);
        }
        let e = row[td] - target[td];
        let logit = row[td + 1];
        let s = success[i];
        total += traj / td as f64 + e * e + softplus(logit) - s * logit;
        grad[[i, td]] = 2.0 * e / b;
        grad[[i, td + 1]] = (logistic(logit) - s) / b;
    }
    (total / b, grad)
}

struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(layers: &[DenseLayer]) -> Self {
        let zeros = || {
            layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect()
        };
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, layers: &mut [DenseLayer], grads: &[LayerGradient], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for (l, layer) in layers.iter_mut().enumerate() {
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            ndarray::Zip::from(&mut layer.weights)
                .and(&grads[l].weights)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&grads[l].bias)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Deterministic train/validation split: the last `val_fraction` of a
/// seeded shuffle is held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 11)));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

fn rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

/// Trains a shadow model on `dataset`.
///
/// `observer` sees every completed epoch; returning `Break` cancels the
/// run. A non-finite loss stops training, restores the last finite weights
/// and records the reason in `training_log.aborted`.
pub fn train(
    id: &str,
    dataset: &Dataset,
    template: &ProgramTemplate,
    hp: &TrainHyperparams,
    init: TrainInit,
    mut observer: impl FnMut(&EpochProgress) -> ControlFlow<()>,
) -> Result<ShadowModel> {
    hp.validate()?;
    template.validate()?;
    if dataset.program_id != template.id {
        return Err(CoreError::validation("training.dataset_mismatch", "dataset belongs to a different program"));
    }
    let (mut model, base_id) = match init {
        TrainInit::Scratch => {
            let arch = NetArchitecture::new(template.dim(), hp.hidden_layers.clone(), hp.dropout_rate, dataset.pad_length);
            let m = ShadowModel::initialized(id, template, arch, dataset.norm_stats.clone(), dataset.dt, hp.seed)?;
            (m, None)
        }
        TrainInit::AsIs(base) | TrainInit::Finetune(base) if base.skill_signature != template.skill_signature() => {
            return Err(CoreError::validation(
                "training.base_mismatch",
                format!("base model `{}` does not match skill signature {}", base.id, template.skill_signature()),
            ));
        }
        TrainInit::AsIs(base) => {
            base.validate()?;
            let mut m = base.clone();
            m.id = id.to_string();
            m.provenance = Provenance::Base { base_id: base.id };
            return Ok(m);
        }
        TrainInit::Finetune(base) => {
            base.validate()?;
            if base.pad_length() != dataset.pad_length {
                return Err(CoreError::validation(
                    "training.base_mismatch",
                    format!(
                        "base model predicts {} samples, dataset is padded to {}",
                        base.pad_length(),
                        dataset.pad_length
                    ),
                ));
            }
            let mut m = base.clone();
            m.id = id.to_string();
            m.architecture.dropout_rate = hp.dropout_rate;
            m.training_log = TrainingLog::default();
            let base_id = base.id;
            (m, Some(base_id))
        }
    };
    if dataset.len() < 2 {
        return Err(CoreError::validation("training.dataset_too_small", "training needs at least two records"));
    }
    model.provenance = match base_id {
        Some(base_id) => Provenance::Finetuned { base_id },
        None => Provenance::FromScratch,
    };

    let data = tensors(dataset, &model);
    let (train_idx, val_idx) = split_indices(dataset.len(), hp.val_fraction, hp.seed);
    let val_x = rows(&data.inputs, &val_idx);
    let val_y = rows(&data.targets, &val_idx);
    let val_s: Vec<f64> = val_idx.iter().map(|&i| data.success[i]).collect();
    let arch = model.architecture.clone();
    let mut adam = Adam::new(&model.layers);
    let mut order = train_idx.clone();
    let mut log = TrainingLog::default();

    for epoch in 0..hp.epochs {
        let snapshot = model.layers.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, epoch as u64, 12));
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(hp.batch_size).enumerate() {
            let x = rows(&data.inputs, batch);
            let y = rows(&data.targets, batch);
            let s: Vec<f64> = batch.iter().map(|&i| data.success[i]).collect();
            let mode = Mode::Train { seed: derive_seed(hp.seed, (epoch * 1_000_003 + b) as u64, 13) };
            let (out, cache) = model.forward_batch(x.view(), mode);
            let (loss, d_out) = loss_and_grad(&arch, &out, &y, &s);
            epoch_loss += loss * batch.len() as f64;
            let (mut grads, _) = model.backward_batch(&cache, d_out);
            if hp.weight_decay > 0.0 {
                for (g, layer) in grads.iter_mut().zip(&model.layers) {
                    g.weights.scaled_add(2.0 * hp.weight_decay, &layer.weights);
                }
            }
            adam.step(&mut model.layers, &grads, hp.learning_rate);
        }
        let train_loss = epoch_loss / order.len() as f64;
        let (val_out, _) = model.forward_batch(val_x.view(), Mode::Eval);
        let val_loss = loss_and_grad(&arch, &val_out, &val_y, &val_s).0;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            model.layers = snapshot;
            log.aborted = Some(format!("non-finite loss in epoch {}", epoch + 1));
            break;
        }
        log.train_loss.push(train_loss);
        log.val_loss.push(val_loss);
        let progress = EpochProgress { epoch: epoch + 1, epochs: hp.epochs, train_loss, val_loss };
        if observer(&progress).is_break() {
            return Err(CoreError::Cancelled { completed: epoch + 1 });
        }
    }

    let (metrics, held_out) = evaluate(&model, dataset, &val_idx);
    log.metrics = Some(metrics);
    log.held_out = held_out;
    model.training_log = log;
    Ok(model)
}

/// Eval-mode metrics of `model` on the given dataset records.
pub fn evaluate(model: &ShadowModel, dataset: &Dataset, indices: &[usize]) -> (ValidationMetrics, Vec<HeldOutPair>) {
    let t = model.pad_length();
    let mut pos_sq = 0.0;
    let mut force_sq = 0.0;
    let mut time_abs = 0.0;
    let mut correct = 0usize;
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in indices {
        let r = &dataset.records[i];
        let pred = model.predict(&r.parameters).expect("dataset records are within bounds");
        let label = r.trajectory.to_channels(t);
        for (k, s) in pred.trajectory.samples.iter().enumerate() {
            for c in 0..3 {
                let e = s.p[c] - label[k * CHANNELS + c];
                pos_sq += e * e;
            }
            let e = s.f - label[k * CHANNELS + FORCE_CHANNEL];
            force_sq += e * e;
        }
        time_abs += (pred.cycle_time - r.trajectory.cycle_time()).abs();
        let predicted_success = pred.success_probability >= 0.5;
        if predicted_success == r.trajectory.success {
            correct += 1;
        }
        pairs.push(HeldOutPair {
            record_index: i,
            cycle_time_label: r.trajectory.cycle_time(),
            cycle_time_pred: pred.cycle_time,
            success_label: r.trajectory.success,
            success_probability: pred.success_probability,
            peak_force_label: r.trajectory.peak_force(),
            peak_force_pred: pred.trajectory.forces().fold(f64::NEG_INFINITY, f64::max),
            path_length_label: r.trajectory.padded(t).path_length(),
            path_length_pred: pred.trajectory.path_length(),
        });
    }
    let n = indices.len().max(1) as f64;
    let metrics = ValidationMetrics {
        traj_rmse: (pos_sq / (n * t as f64 * 3.0)).sqrt(),
        force_rmse: (force_sq / (n * t as f64)).sqrt(),
        time_mae: time_abs / n,
        success_accuracy: correct as f64 / n,
    };
    (metrics, pairs)
}

/// Output slice of the network for a batch of normalized inputs, eval mode.
pub fn eval_outputs(model: &ShadowModel, unit_inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = model.architecture.input_dim;
    let flat: Vec<f64> = unit_inputs.iter().flatten().copied().collect();
    let x = Array2::from_shape_vec((unit_inputs.len(), d), flat).expect("input shape");
    let (out, _) = model.forward_batch(x.view(), Mode::Eval);
    out.outer_iter().map(|r| r.to_vec()).collect()
}

/// Hidden activations (eval mode) at every layer input, for relevance propagation.
pub(crate) fn layer_inputs_eval(model: &ShadowModel, unit_input: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x = Array2::from_shape_vec((1, unit_input.len()), unit_input.to_vec()).expect("input shape");
    let (out, cache) = model.forward_batch(x.view(), Mode::Eval);
    let inputs = cache.layer_inputs.iter().map(|a| a.row(0).to_vec()).collect();
    (inputs, out.slice(s![0, ..]).to_vec())
}
