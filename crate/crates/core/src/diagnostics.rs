//! Classification of a finished training run from its loss curves.
//!
//! Rules run in a fixed order on 11-epoch centered moving averages of the
//! loss curves; every threshold is a ratio, so scaling both curves by the
//! same positive factor never changes the label.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::net::{TrainHyperparams, TrainingLog};
use crate::quality::QualityReport;

pub const SMOOTHING_WINDOW: usize = 11;
pub const MIN_EPOCHS: usize = 10;
/// The smoothed validation curve must fall at least this fraction below
/// its start, or the data is considered unlearnable.
pub const MIN_VAL_IMPROVEMENT: f64 = 0.05;
pub const MAX_OUTLIER_FRACTION: f64 = 0.1;
pub const REGULARIZATION_RATIO: f64 = 2.0;
pub const OVERFITTING_RATIO: f64 = 2.0;
pub const UNDERFITTING_LEVEL: f64 = 0.3;
/// Plateau bound on the per-epoch slope, relative to the initial loss.
pub const PLATEAU_SLOPE: f64 = 1e-3;
/// Share of final epochs used for trend slopes.
pub const TAIL_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    GoodPerformance,
    Overfitting,
    Underfitting,
    Regularization,
    ErroneousTrainingData,
}

impl VerdictLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictLabel::GoodPerformance => "good_performance",
            VerdictLabel::Overfitting => "overfitting",
            VerdictLabel::Underfitting => "underfitting",
            VerdictLabel::Regularization => "regularization",
            VerdictLabel::ErroneousTrainingData => "erroneous_training_data",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Evidence {
    pub epochs: usize,
    pub initial_train_loss: Option<f64>,
    pub initial_val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    /// `final_val_loss / final_train_loss`.
    pub gap_ratio: Option<f64>,
    /// Relative drop of the smoothed validation curve below its start.
    pub val_improvement: Option<f64>,
    /// Least-squares slopes over the last quarter of epochs, per epoch and
    /// relative to the initial smoothed loss.
    pub train_slope: Option<f64>,
    pub val_slope: Option<f64>,
    pub outlier_fraction: Option<f64>,
    pub dropout_rate: f64,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainingVerdict {
    pub label: VerdictLabel,
    pub evidence: Evidence,
    pub explanation_key: String,
    /// Reason within the label, e.g. which erroneous-data check fired.
    pub reason_key: String,
}

/// Centered moving average; the window shrinks symmetrically at the edges.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let slice = &values[i - h..=i + h];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Ordinary least-squares slope of `values` against their index.
pub fn slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub fn classify(log: &TrainingLog, hp: &TrainHyperparams, quality: Option<&QualityReport>) -> Result<TrainingVerdict> {
    let epochs = log.epochs();
    let aborted = log.aborted.is_some();
    if epochs < MIN_EPOCHS && !aborted {
        return Err(CoreError::validation(
            "diagnostics.log_too_short",
            format!("classification needs at least {MIN_EPOCHS} epochs, the log has {epochs}"),
        ));
    }
    let outlier_fraction = quality.map(|q| q.outlier_fraction);
    let mut evidence = Evidence { epochs, outlier_fraction, dropout_rate: hp.dropout_rate, aborted, ..Default::default() };
    let verdict = |label: VerdictLabel, reason: &str, evidence: Evidence| TrainingVerdict {
        label,
        evidence,
        explanation_key: format!("diagnostics.{}", label.as_str()),
        reason_key: format!("diagnostics.{reason}"),
    };
    let finite = log.train_loss.iter().chain(&log.val_loss).all(|v| v.is_finite());
    if aborted || !finite || epochs == 0 {
        return Ok(verdict(VerdictLabel::ErroneousTrainingData, "non_finite_loss", evidence));
    }

    let train = smooth(&log.train_loss, SMOOTHING_WINDOW);
    let val = smooth(&log.val_loss, SMOOTHING_WINDOW);
    let (t0, v0) = (train[0], val[0]);
    let (tf, vf) = (train[epochs - 1], val[epochs - 1]);
    let tail = ((epochs as f64 * TAIL_FRACTION).ceil() as usize).max(2).min(epochs);
    let v_min = val.iter().copied().fold(f64::INFINITY, f64::min);
    evidence.initial_train_loss = Some(t0);
    evidence.initial_val_loss = Some(v0);
    evidence.final_train_loss = Some(tf);
    evidence.final_val_loss = Some(vf);
    evidence.gap_ratio = Some(vf / tf);
    evidence.val_improvement = Some((v0 - v_min) / v0);
    evidence.train_slope = Some(slope(&train[epochs - tail..]) / t0);
    evidence.val_slope = Some(slope(&val[epochs - tail..]) / v0);

    if (v0 - v_min) / v0 < MIN_VAL_IMPROVEMENT {
        return Ok(verdict(VerdictLabel::ErroneousTrainingData, "val_loss_not_decreasing", evidence));
    }
    if outlier_fraction.is_some_and(|f| f > MAX_OUTLIER_FRACTION) {
        return Ok(verdict(VerdictLabel::ErroneousTrainingData, "too_many_outliers", evidence));
    }
    if tf > REGULARIZATION_RATIO * vf {
        return Ok(verdict(VerdictLabel::Regularization, "train_above_val", evidence));
    }
    let val_slope = evidence.val_slope.unwrap();
    if vf > OVERFITTING_RATIO * tf && val_slope > 0.0 {
        return Ok(verdict(VerdictLabel::Overfitting, "val_rising", evidence));
    }
    let train_slope = evidence.train_slope.unwrap();
    if tf > UNDERFITTING_LEVEL * t0
        && vf > UNDERFITTING_LEVEL * v0
        && train_slope.abs() < PLATEAU_SLOPE
        && val_slope.abs() < PLATEAU_SLOPE
    {
        return Ok(verdict(VerdictLabel::Underfitting, "plateau_high", evidence));
    }
    Ok(verdict(VerdictLabel::GoodPerformance, "good_fit", evidence))
}
