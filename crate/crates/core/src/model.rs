//! Domain types shared across the workflow: program templates and their
//! parameters, sampled trajectories, execution records and datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Signals recorded per trajectory sample: x, y, z position and force magnitude.
pub const CHANNELS: usize = 4;
pub const FORCE_CHANNEL: usize = 3;

/// Upper bound applied to the default pad length when none is requested.
pub const DEFAULT_MAX_PAD_LENGTH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    Approach,
    SpiralSearch,
    Insert,
}

impl SkillKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SkillKind::Approach => "approach",
            SkillKind::SpiralSearch => "spiral_search",
            SkillKind::Insert => "insert",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ParameterSpec {
    pub name: String,
    pub unit: String,
    pub lower_bound: f64,
    pub upper_bound: f64,
    #[serde(default)]
    pub expert_only: bool,
    /// The skill this parameter configures.
    pub skill: SkillKind,
}

impl ParameterSpec {
    pub fn range(&self) -> f64 {
        self.upper_bound - self.lower_bound
    }

    pub fn contains(&self, value: f64) -> bool {
        value.is_finite() && value >= self.lower_bound && value <= self.upper_bound
    }

    /// Affine map of the box `[lower, upper]` onto `[0, 1]`.
    pub fn to_unit(&self, value: f64) -> f64 {
        (value - self.lower_bound) / self.range()
    }

    pub fn from_unit(&self, unit: f64) -> f64 {
        self.lower_bound + unit * self.range()
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.lower_bound, self.upper_bound)
    }
}

/// Named program parameter values, ordered like the template's specs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(transparent)]
pub struct ParameterVector(pub IndexMap<String, f64>);

impl ParameterVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.0.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn set(&mut self, name: &str, value: f64) -> Option<f64> {
        self.0.get_mut(name).map(|v| std::mem::replace(v, value))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.values().copied().collect()
    }
}

impl FromIterator<(String, f64)> for ParameterVector {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        ParameterVector(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProgramTemplate {
    pub id: String,
    pub skill_sequence: Vec<SkillKind>,
    pub parameter_specs: Vec<ParameterSpec>,
}

impl ProgramTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(CoreError::validation_at("program.invalid", "program id is empty", "id"));
        }
        if self.skill_sequence.is_empty() {
            return Err(CoreError::validation_at(
                "program.invalid",
                "skill_sequence must not be empty",
                "skill_sequence",
            ));
        }
        if self.parameter_specs.is_empty() {
            return Err(CoreError::validation_at(
                "program.invalid",
                "program has no parameters",
                "parameter_specs",
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, spec) in self.parameter_specs.iter().enumerate() {
            let path = format!("parameter_specs[{i}]");
            if !seen.insert(spec.name.as_str()) {
                return Err(CoreError::validation_at(
                    "program.invalid",
                    format!("duplicate parameter name `{}`", spec.name),
                    format!("{path}.name"),
                ));
            }
            if !(spec.lower_bound.is_finite()
                && spec.upper_bound.is_finite()
                && spec.lower_bound < spec.upper_bound)
            {
                return Err(CoreError::validation_at(
                    "program.invalid",
                    format!("parameter `{}` needs lower_bound < upper_bound", spec.name),
                    path,
                ));
            }
            if !self.skill_sequence.contains(&spec.skill) {
                return Err(CoreError::validation_at(
                    "program.invalid",
                    format!(
                        "parameter `{}` references skill `{}` not in the skill sequence",
                        spec.name,
                        spec.skill.as_str()
                    ),
                    format!("{path}.skill"),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.parameter_specs.len()
    }

    pub fn spec(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameter_specs.iter().find(|s| s.name == name)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameter_specs.iter().map(|s| s.name.clone()).collect()
    }

    /// Identifies which models can serve as base models for this program:
    /// the ordered skill kinds plus the ordered parameter names.
    pub fn skill_signature(&self) -> String {
        skill_signature(&self.skill_sequence, &self.parameter_specs)
    }

    /// Checks key set, order and bounds. All offending names are listed.
    pub fn check(&self, x: &ParameterVector) -> Result<()> {
        check_parameters(&self.parameter_specs, x)
    }

    /// Builds a vector from values given in spec order (no bounds check).
    pub fn vector(&self, values: &[f64]) -> ParameterVector {
        self.parameter_specs
            .iter()
            .zip(values)
            .map(|(s, v)| (s.name.clone(), *v))
            .collect()
    }

    pub fn midpoint(&self) -> ParameterVector {
        self.parameter_specs
            .iter()
            .map(|s| (s.name.clone(), 0.5 * (s.lower_bound + s.upper_bound)))
            .collect()
    }
}

pub fn skill_signature(skills: &[SkillKind], specs: &[ParameterSpec]) -> String {
    let skills: Vec<&str> = skills.iter().map(|s| s.as_str()).collect();
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    format!("{}|{}", skills.join("+"), names.join(","))
}

pub fn check_parameters(specs: &[ParameterSpec], x: &ParameterVector) -> Result<()> {
    let names_match = specs.len() == x.len()
        && specs.iter().zip(x.0.keys()).all(|(s, k)| &s.name == k);
    if !names_match {
        let expected: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let got: Vec<&str> = x.0.keys().map(|k| k.as_str()).collect();
        return Err(CoreError::validation(
            "parameter.keys_mismatch",
            format!("expected parameters {expected:?} in this order, got {got:?}"),
        ));
    }
    let offending: Vec<String> = specs
        .iter()
        .filter(|s| !s.contains(x.0[&s.name]))
        .map(|s| {
            format!(
                "{} = {} not in [{}, {}]",
                s.name, x.0[&s.name], s.lower_bound, s.upper_bound
            )
        })
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        let first = specs.iter().find(|s| !s.contains(x.0[&s.name])).unwrap();
        Err(CoreError::validation_at(
            "parameter.out_of_bounds",
            format!("parameters out of bounds: {}", offending.join("; ")),
            first.name.clone(),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Sample {
    /// End-effector position in mm.
    pub p: [f64; 3],
    /// Contact force magnitude in N.
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Trajectory {
    /// Sampling period in seconds.
    pub dt: f64,
    pub samples: Vec<Sample>,
    pub success: bool,
    #[serde(rename = "skills")]
    pub skill_annotations: Vec<SkillKind>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(rename = "ts")]
    pub timestamp: DateTime<Utc>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CoreError::validation_at("trajectory.invalid", "dt must be > 0", "dt"));
        }
        if self.samples.is_empty() {
            return Err(CoreError::validation_at(
                "trajectory.invalid",
                "trajectory has no samples",
                "samples",
            ));
        }
        if self.skill_annotations.len() != self.samples.len() {
            return Err(CoreError::validation_at(
                "trajectory.invalid",
                format!(
                    "{} skill annotations for {} samples",
                    self.skill_annotations.len(),
                    self.samples.len()
                ),
                "skills",
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.f.is_finite() && s.f >= 0.0) || s.p.iter().any(|c| !c.is_finite()) {
                return Err(CoreError::validation_at(
                    "trajectory.invalid",
                    format!("sample {i} has a negative or non-finite value"),
                    format!("samples[{i}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn path_length(&self) -> f64 {
        path_length(&self.samples)
    }

    pub fn cycle_time(&self) -> f64 {
        self.samples.len().saturating_sub(1) as f64 * self.dt
    }

    pub fn peak_force(&self) -> f64 {
        self.samples.iter().map(|s| s.f).fold(0.0, f64::max)
    }

    /// Resizes to exactly `len` samples: truncates, or holds the last
    /// position with zero force.
    pub fn padded(&self, len: usize) -> Trajectory {
        pad_trajectory(self, len)
    }

    /// Flattened `[x, y, z, f]` rows of the padded trajectory.
    pub fn to_channels(&self, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len * CHANNELS);
        for i in 0..len {
            match self.samples.get(i) {
                Some(s) => out.extend_from_slice(&[s.p[0], s.p[1], s.p[2], s.f]),
                None => {
                    let last = self.samples.last().expect("non-empty trajectory");
                    out.extend_from_slice(&[last.p[0], last.p[1], last.p[2], 0.0]);
                }
            }
        }
        out
    }
}

pub fn pad_trajectory(traj: &Trajectory, len: usize) -> Trajectory {
    assert!(len >= 1, "pad length must be at least 1");
    let mut out = traj.clone();
    if out.samples.len() >= len {
        out.samples.truncate(len);
        out.skill_annotations.truncate(len);
    } else {
        let last = *out.samples.last().expect("non-empty trajectory");
        let last_skill = *out.skill_annotations.last().expect("non-empty annotations");
        out.samples.resize(len, Sample { p: last.p, f: 0.0 });
        out.skill_annotations.resize(len, last_skill);
    }
    out
}

pub fn path_length(samples: &[Sample]) -> f64 {
    samples
        .windows(2)
        .map(|w| {
            let d = [w[1].p[0] - w[0].p[0], w[1].p[1] - w[0].p[1], w[1].p[2] - w[0].p[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExecutionRecord {
    pub program_id: String,
    pub parameters: ParameterVector,
    pub trajectory: Trajectory,
}

impl ExecutionRecord {
    pub fn validate(&self, template: &ProgramTemplate) -> Result<()> {
        if self.program_id != template.id {
            return Err(CoreError::validation_at(
                "execution.program_mismatch",
                format!("record references `{}`, not `{}`", self.program_id, template.id),
                "program_id",
            ));
        }
        template.check(&self.parameters)?;
        self.trajectory.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DatasetFilter {
    #[serde(default)]
    pub time_from: Option<DateTime<Utc>>,
    #[serde(default)]
    pub time_to: Option<DateTime<Utc>>,
    #[serde(default)]
    pub tag_equals: BTreeMap<String, String>,
}

impl DatasetFilter {
    pub fn validate(&self) -> Result<()> {
        if let (Some(from), Some(to)) = (self.time_from, self.time_to) {
            if from > to {
                return Err(CoreError::validation_at(
                    "filter.invalid",
                    "time_from is after time_to",
                    "filter.time_from",
                ));
            }
        }
        Ok(())
    }

    pub fn matches(&self, record: &ExecutionRecord) -> bool {
        let ts = record.trajectory.timestamp;
        self.time_from.is_none_or(|from| ts >= from)
            && self.time_to.is_none_or(|to| ts <= to)
            && self
                .tag_equals
                .iter()
                .all(|(k, v)| record.trajectory.tags.get(k) == Some(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn from_values(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        ChannelStats { mean, std: var.sqrt() }
    }

    /// Zero spread; such channels are shifted but never divided.
    pub fn is_degenerate(&self) -> bool {
        self.std <= 0.0
    }

    pub fn scale(&self) -> f64 {
        if self.is_degenerate() {
            1.0
        } else {
            self.std
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale()
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        self.mean + z * self.scale()
    }
}

/// Normalization statistics of a dataset. `trajectory` holds one entry per
/// padded output value, indexed `step * CHANNELS + channel`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct NormStats {
    pub parameters: Vec<ChannelStats>,
    pub trajectory: Vec<ChannelStats>,
    pub cycle_time: ChannelStats,
}

impl NormStats {
    pub fn compute(records: &[ExecutionRecord], template: &ProgramTemplate, pad_length: usize) -> Self {
        let parameters = template
            .parameter_specs
            .iter()
            .map(|s| ChannelStats::from_values(records.iter().map(|r| r.parameters.0[&s.name])))
            .collect();
        let rows: Vec<Vec<f64>> = records.iter().map(|r| r.trajectory.to_channels(pad_length)).collect();
        let mut trajectory: Vec<ChannelStats> = (0..pad_length * CHANNELS)
            .map(|j| ChannelStats::from_values(rows.iter().map(|row| row[j])))
            .collect();
        // Positions share one spread and force has its own, pooled over time.
        for group in [&[0usize, 1, 2][..], &[FORCE_CHANNEL][..]] {
            let cells: Vec<usize> = (0..pad_length).flat_map(|t| group.iter().map(move |c| t * CHANNELS + c)).collect();
            let var = cells.iter().map(|&j| trajectory[j].std * trajectory[j].std).sum::<f64>() / cells.len() as f64;
            for &j in &cells {
                trajectory[j].std = var.sqrt();
            }
        }
        let cycle_time = ChannelStats::from_values(records.iter().map(|r| r.trajectory.cycle_time()));
        NormStats { parameters, trajectory, cycle_time }
    }

    /// Identity statistics: zero mean and unit spread everywhere.
    pub fn identity(input_dim: usize, pad_length: usize) -> Self {
        let unit = ChannelStats { mean: 0.0, std: 1.0 };
        NormStats {
            parameters: vec![unit; input_dim],
            trajectory: vec![unit; pad_length * CHANNELS],
            cycle_time: unit,
        }
    }

    pub fn pad_length(&self) -> usize {
        self.trajectory.len() / CHANNELS
    }

    pub fn degenerate_channels(&self) -> Vec<usize> {
        self.trajectory
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_degenerate())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Request to assemble a dataset from a pool of executions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DatasetRequest {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub filter: DatasetFilter,
    /// Defaults to the longest selected trajectory, capped at 512 samples.
    #[serde(default)]
    pub pad_length: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Dataset {
    pub id: String,
    pub name: String,
    pub program_id: String,
    pub records: Vec<ExecutionRecord>,
    pub pad_length: usize,
    pub dt: f64,
    pub filter: DatasetFilter,
    pub norm_stats: NormStats,
}

impl Dataset {
    /// Selects the template's executions that pass the filter, checks that
    /// they share one sampling period and computes normalization statistics.
    pub fn build<'a>(
        request: &DatasetRequest,
        template: &ProgramTemplate,
        executions: impl IntoIterator<Item = &'a ExecutionRecord>,
    ) -> Result<Dataset> {
        request.filter.validate()?;
        if request.name.trim().is_empty() {
            return Err(CoreError::validation_at("dataset.invalid", "dataset name is empty", "name"));
        }
        let records: Vec<ExecutionRecord> = executions
            .into_iter()
            .filter(|r| r.program_id == template.id && request.filter.matches(r))
            .cloned()
            .collect();
        Self::from_records(request, template, records)
    }

    pub fn from_records(
        request: &DatasetRequest,
        template: &ProgramTemplate,
        records: Vec<ExecutionRecord>,
    ) -> Result<Dataset> {
        if records.is_empty() {
            return Err(CoreError::validation(
                "dataset.empty",
                "no executions of the program match the filter",
            ));
        }
        for (i, r) in records.iter().enumerate() {
            r.validate(template).map_err(|e| match e {
                CoreError::Validation { key, message, .. } => CoreError::Validation {
                    key,
                    message: format!("record {i}: {message}"),
                    field_path: Some(format!("records[{i}]")),
                },
                other => other,
            })?;
        }
        let dt = records[0].trajectory.dt;
        if let Some(i) = records.iter().position(|r| r.trajectory.dt != dt) {
            return Err(CoreError::validation_at(
                "dataset.dt_mismatch",
                format!(
                    "record {i} has dt = {} but the dataset uses dt = {dt}",
                    records[i].trajectory.dt
                ),
                format!("records[{i}].trajectory.dt"),
            ));
        }
        let pad_length = match request.pad_length {
            Some(0) => {
                return Err(CoreError::validation_at(
                    "dataset.invalid",
                    "pad_length must be at least 1",
                    "pad_length",
                ))
            }
            Some(t) => t,
            None => records
                .iter()
                .map(|r| r.trajectory.len())
                .max()
                .unwrap_or(1)
                .min(DEFAULT_MAX_PAD_LENGTH),
        };
        let norm_stats = NormStats::compute(&records, template, pad_length);
        Ok(Dataset {
            id: request.id.clone(),
            name: request.name.clone(),
            program_id: template.id.clone(),
            records,
            pad_length,
            dt,
            filter: request.filter.clone(),
            norm_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean parameter values over the records, in template order.
    pub fn mean_parameters(&self, template: &ProgramTemplate) -> ParameterVector {
        template
            .parameter_specs
            .iter()
            .zip(&self.norm_stats.parameters)
            .map(|(s, c)| (s.name.clone(), s.clamp(c.mean)))
            .collect()
    }
}

/// Serializes any domain entity to its canonical JSON document.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("domain types serialize infallibly")
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("domain types serialize infallibly")
}

/// Parses a JSON document, reporting the field path of the first error.
/// Unknown fields are ignored.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        CoreError::Parse { path, message: err.into_inner().to_string() }
    })
}

/// Reads a JSON-lines stream, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json(&line).map_err(|e| match e {
            CoreError::Parse { path, message } => CoreError::Parse {
                path: format!("line {}: {path}", lineno + 1),
                message,
            },
            other => other,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    mut writer: impl Write,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    for item in items {
        writeln!(writer, "{}", to_json(item))?;
    }
    Ok(())
}
