//! Request and response documents of the API.

use chrono::{DateTime, Utc};
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shadowopt_core::diagnostics::TrainingVerdict;
use shadowopt_core::lrp::{HeadRelevance, RelevanceReport, TargetHead};
use shadowopt_core::model::{Dataset, DatasetFilter, ExecutionRecord, NormStats, ParameterVector, SkillKind};
use shadowopt_core::net::{HeldOutPair, Provenance, ShadowModel, TrainHyperparams, ValidationMetrics};
use shadowopt_core::optimizer::{ObjectiveSpec, OptimizationRun, OptimizerHyperparams, ParameterComparison};
use shadowopt_core::quality::{QualityReport, QualityThresholds};
use shadowopt_core::sim::PROGRAM_ID;

use crate::error::{ApiError, ApiResult};

/// Deserializes a write body, rejecting unknown fields with their path.
pub fn parse_strict<T: DeserializeOwned>(value: serde_json::Value) -> ApiResult<T> {
    let mut unknown: Option<String> = None;
    let mut record = |path: serde_ignored::Path| {
        unknown.get_or_insert_with(|| path.to_string());
    };
    let de = serde_ignored::Deserializer::new(value, &mut record);
    let parsed: Result<T, _> = serde_path_to_error::deserialize(de);
    match parsed {
        Ok(v) => match unknown {
            Some(path) => Err(ApiError::validation(
                "request.unknown_field",
                format!("unknown field `{path}`"),
                Some(path),
            )),
            None => Ok(v),
        },
        Err(e) => {
            let path = e.path().to_string();
            let path = if path == "." { None } else { Some(path) };
            Err(ApiError::validation("request.malformed", e.into_inner().to_string(), path))
        }
    }
}

pub fn parse_strict_str<T: DeserializeOwned>(text: &str) -> ApiResult<T> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ApiError::validation("request.malformed", format!("invalid JSON: {e}"), None))?;
    parse_strict(value)
}

fn default_program() -> String {
    PROGRAM_ID.into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct IngestResult {
    pub ingested: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExecutionQuery {
    pub program_id: Option<String>,
    #[serde(default)]
    pub filter: DatasetFilter,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExecutionPage {
    /// Matching executions before paging.
    pub total: usize,
    pub offset: usize,
    pub records: Vec<ExecutionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CreateDataset {
    #[serde(default)]
    pub id: Option<String>,
    pub name: String,
    #[serde(default = "default_program")]
    pub program_id: String,
    #[serde(default)]
    pub filter: DatasetFilter,
    #[serde(default)]
    pub pad_length: Option<usize>,
    /// Accept a dataset that fails the quality checks.
    #[serde(default, rename = "override")]
    pub override_quality: bool,
    #[serde(default)]
    pub thresholds: Option<QualityThresholds>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DatasetInfo {
    pub id: String,
    pub name: String,
    pub program_id: String,
    pub record_count: usize,
    pub pad_length: usize,
    pub dt: f64,
    pub filter: DatasetFilter,
    pub norm_stats: NormStats,
    pub quality: QualityReport,
    /// Mean parameter vector, the default optimization start.
    pub mean_parameters: ParameterVector,
    #[serde(rename = "override")]
    pub override_quality: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub info: DatasetInfo,
    pub dataset: Dataset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitRequest {
    #[default]
    Scratch,
    AsIs { base_id: String },
    Finetune { base_id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainRequest {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    pub dataset_id: String,
    #[serde(default)]
    pub init: InitRequest,
    #[serde(default)]
    pub hyperparams: TrainHyperparams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelDocument {
    pub model: ShadowModel,
    pub dataset_id: String,
    pub hyperparams: TrainHyperparams,
    /// Absent when the log is too short to classify.
    pub verdict: Option<TrainingVerdict>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelSummary {
    pub id: String,
    pub name: String,
    pub program_id: String,
    pub skill_signature: String,
    pub provenance: Provenance,
    pub dataset_id: String,
    pub epochs: usize,
    pub metrics: Option<ValidationMetrics>,
    pub verdict: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl ModelSummary {
    pub fn of(doc: &ModelDocument) -> Self {
        let m = &doc.model;
        ModelSummary {
            id: m.id.clone(),
            name: m.name.clone(),
            program_id: m.program_id.clone(),
            skill_signature: m.skill_signature.clone(),
            provenance: m.provenance.clone(),
            dataset_id: doc.dataset_id.clone(),
            epochs: m.training_log.epochs(),
            metrics: m.training_log.metrics.clone(),
            verdict: doc.verdict.as_ref().map(|v| v.label.as_str().to_string()),
            created_at: doc.created_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DiagnosticsReport {
    pub model_id: String,
    pub verdict: Option<TrainingVerdict>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// The curves the classifier saw.
    pub smoothed_train_loss: Vec<f64>,
    pub smoothed_val_loss: Vec<f64>,
    pub metrics: Option<ValidationMetrics>,
    pub held_out: Vec<HeldOutPair>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LrpRequest {
    /// Defaults to the training dataset mean.
    #[serde(default)]
    pub x: Option<ParameterVector>,
    /// Defaults to every head.
    #[serde(default)]
    pub heads: Option<Vec<TargetHead>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LrpResponse {
    pub model_id: String,
    pub probe_x: ParameterVector,
    pub reports: Vec<RelevanceReport>,
    pub bars: Vec<HeadRelevance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PredictRequest {
    pub x: ParameterVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OptimizeRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub model_id: String,
    /// Defaults to the training dataset mean.
    #[serde(default)]
    pub x_init: Option<ParameterVector>,
    #[serde(default)]
    pub spec: ObjectiveSpec,
    #[serde(default)]
    pub hyperparams: OptimizerHyperparams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OptimizationDocument {
    pub run: OptimizationRun,
    pub comparison: Vec<ParameterComparison>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WhatIfRequest {
    pub model_id: String,
    pub x: ParameterVector,
    #[serde(default)]
    pub spec: ObjectiveSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowStep {
    Dataset,
    Training,
    Optimization,
}

impl WorkflowStep {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WorkflowSession {
    pub id: String,
    pub program_id: String,
    pub target_skills: Vec<SkillKind>,
    pub current_step: WorkflowStep,
    pub dataset_id: Option<String>,
    pub model_ids: Vec<String>,
    pub run_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CreateSession {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_program")]
    pub program_id: String,
    /// Defaults to every skill of the program.
    #[serde(default)]
    pub target_skills: Option<Vec<SkillKind>>,
}

/// Moves a session to an adjacent step, optionally binding entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StepRequest {
    pub step: WorkflowStep,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub run_id: Option<String>,
}
