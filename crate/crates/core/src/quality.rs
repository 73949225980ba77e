//! Dataset checks shown before training: input variance, label outliers
//! and success balance, plus box-plot and envelope summaries.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Dataset, ProgramTemplate, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct QualityThresholds {
    /// Minimum `(max - min) / (upper - lower)` for a parameter to count as varied.
    pub min_coverage: f64,
    pub min_distinct: usize,
    /// Largest tolerated share of outlier records.
    pub max_outlier_fraction: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds { min_coverage: 0.2, min_distinct: 5, max_outlier_fraction: 0.1 }
    }
}

impl QualityThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(CoreError::validation_at("quality.thresholds_invalid", "min_coverage must lie in [0, 1]", "min_coverage"));
        }
        if !(0.0..=1.0).contains(&self.max_outlier_fraction) {
            return Err(CoreError::validation_at(
                "quality.thresholds_invalid",
                "max_outlier_fraction must lie in [0, 1]",
                "max_outlier_fraction",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Five-number summary with Tukey fences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> BoxStats {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&v, 0.25);
        let q3 = quantile_sorted(&v, 0.75);
        let iqr = q3 - q1;
        BoxStats {
            min: v[0],
            q1,
            median: quantile_sorted(&v, 0.5),
            q3,
            max: v[v.len() - 1],
            lower_fence: q1 - 1.5 * iqr,
            upper_fence: q3 + 1.5 * iqr,
        }
    }

    pub fn is_outlier(&self, v: f64) -> bool {
        v < self.lower_fence || v > self.upper_fence
    }
}

/// Linear-interpolation quantile of sorted data (position `q * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ParameterQuality {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub quartiles: Quartiles,
    pub coverage_ratio: f64,
    pub distinct_values: usize,
    pub sufficient: bool,
    pub message_key: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct QualityReport {
    pub per_parameter: Vec<ParameterQuality>,
    pub path_length: BoxStats,
    pub peak_force: BoxStats,
    pub outlier_indices: Vec<usize>,
    pub outlier_fraction: f64,
    pub success_count: usize,
    pub fail_count: usize,
    pub overall_ok: bool,
    /// Keys of every failed check, empty when `overall_ok`.
    pub issues: Vec<String>,
}

pub fn analyze(dataset: &Dataset, template: &ProgramTemplate, thresholds: &QualityThresholds) -> Result<QualityReport> {
    if dataset.is_empty() {
        return Err(CoreError::validation("dataset.empty", "the dataset has no records"));
    }
    let per_parameter: Vec<ParameterQuality> = template
        .parameter_specs
        .iter()
        .map(|spec| {
            let values: Vec<f64> = dataset.records.iter().map(|r| r.parameters.0[&spec.name]).collect();
            let stats = BoxStats::of(&values);
            let coverage_ratio = ((stats.max - stats.min) / spec.range()).clamp(0.0, 1.0);
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            let distinct_values = sorted.len();
            let sufficient = coverage_ratio >= thresholds.min_coverage && distinct_values >= thresholds.min_distinct;
            let (message_key, message) = if sufficient {
                ("quality.variance_sufficient", format!("`{}` varies enough to be optimized", spec.name))
            } else if distinct_values < thresholds.min_distinct {
                (
                    "quality.too_few_values",
                    format!(
                        "`{}` takes only {distinct_values} distinct values; at least {} are needed",
                        spec.name, thresholds.min_distinct
                    ),
                )
            } else {
                (
                    "quality.variance_insufficient",
                    format!(
                        "`{}` covers {:.0}% of its range; at least {:.0}% is needed",
                        spec.name,
                        coverage_ratio * 100.0,
                        thresholds.min_coverage * 100.0
                    ),
                )
            };
            ParameterQuality {
                name: spec.name.clone(),
                min: stats.min,
                max: stats.max,
                quartiles: Quartiles { q1: stats.q1, median: stats.median, q3: stats.q3 },
                coverage_ratio,
                distinct_values,
                sufficient,
                message_key: message_key.into(),
                message,
            }
        })
        .collect();

    let paths: Vec<f64> = dataset.records.iter().map(|r| r.trajectory.path_length()).collect();
    let forces: Vec<f64> = dataset.records.iter().map(|r| r.trajectory.peak_force()).collect();
    let path_length = BoxStats::of(&paths);
    let peak_force = BoxStats::of(&forces);
    let outlier_indices: Vec<usize> = (0..dataset.len())
        .filter(|&i| path_length.is_outlier(paths[i]) || peak_force.is_outlier(forces[i]))
        .collect();
    let outlier_fraction = outlier_indices.len() as f64 / dataset.len() as f64;
    let success_count = dataset.records.iter().filter(|r| r.trajectory.success).count();
    let fail_count = dataset.len() - success_count;

    let mut issues = Vec::new();
    if per_parameter.iter().any(|p| !p.sufficient) {
        issues.push("quality.variance_insufficient".to_string());
    }
    if outlier_fraction > thresholds.max_outlier_fraction {
        issues.push("quality.too_many_outliers".to_string());
    }
    if success_count == 0 {
        issues.push("quality.no_successes".to_string());
    }
    if fail_count == 0 {
        issues.push("quality.no_failures".to_string());
    }
    Ok(QualityReport {
        per_parameter,
        path_length,
        peak_force,
        outlier_indices,
        outlier_fraction,
        success_count,
        fail_count,
        overall_ok: issues.is_empty(),
        issues,
    })
}

/// Pointwise min/mean/max of one channel over time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ChannelEnvelope {
    pub channel: String,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

/// Envelopes for one success group; `count == 0` leaves every array empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EnvelopeGroup {
    pub count: usize,
    pub empty: bool,
    pub channels: Vec<ChannelEnvelope>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ParameterBox {
    pub name: String,
    pub stats: BoxStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DistributionSummary {
    pub pad_length: usize,
    pub parameters: Vec<ParameterBox>,
    pub success: EnvelopeGroup,
    pub failure: EnvelopeGroup,
}

pub const CHANNEL_NAMES: [&str; CHANNELS] = ["x", "y", "z", "f"];

pub fn distribution_summary(dataset: &Dataset, template: &ProgramTemplate) -> Result<DistributionSummary> {
    if dataset.is_empty() {
        return Err(CoreError::validation("dataset.empty", "the dataset has no records"));
    }
    let parameters = template
        .parameter_specs
        .iter()
        .map(|s| {
            let values: Vec<f64> = dataset.records.iter().map(|r| r.parameters.0[&s.name]).collect();
            ParameterBox { name: s.name.clone(), stats: BoxStats::of(&values) }
        })
        .collect();
    let t = dataset.pad_length;
    let group = |success: bool| {
        let rows: Vec<Vec<f64>> = dataset
            .records
            .iter()
            .filter(|r| r.trajectory.success == success)
            .map(|r| r.trajectory.to_channels(t))
            .collect();
        if rows.is_empty() {
            return EnvelopeGroup { count: 0, empty: true, channels: Vec::new() };
        }
        let channels = CHANNEL_NAMES
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mut env = ChannelEnvelope { channel: name.to_string(), ..Default::default() };
                for k in 0..t {
                    let column = rows.iter().map(|row| row[k * CHANNELS + c]);
                    env.min.push(column.clone().fold(f64::INFINITY, f64::min));
                    env.max.push(column.clone().fold(f64::NEG_INFINITY, f64::max));
                    env.mean.push(column.sum::<f64>() / rows.len() as f64);
                }
                env
            })
            .collect();
        EnvelopeGroup { count: rows.len(), empty: false, channels }
    };
    Ok(DistributionSummary { pad_length: t, parameters, success: group(true), failure: group(false) })
}
