//! Workflow operations shared by the HTTP handlers and the CLI.

use std::collections::HashMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::{Arc, RwLock};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shadowopt_core::diagnostics::{classify, smooth, SMOOTHING_WINDOW};
use shadowopt_core::lrp::{bars, relevance, HeadRelevance, TargetHead};
use shadowopt_core::model::{Dataset, DatasetRequest, ExecutionRecord, ParameterVector, ProgramTemplate};
use shadowopt_core::net::{train, EpochProgress, Prediction, ShadowModel, TrainInit};
use shadowopt_core::optimizer::{compare_parameterizations, optimize, what_if, IterationProgress, WhatIf};
use shadowopt_core::quality::{analyze, distribution_summary, DistributionSummary, QualityReport, QualityThresholds};
use shadowopt_core::sim::gearbox_template;

use crate::dto::*;
use crate::error::{ApiError, ApiResult, ErrorBody};
use crate::jobs::{JobHandle, JobKind, JobState, JobStatus, Jobs, PartialMetrics};
use crate::store::{check_id, Kind, Store, INBOX_DIR};

fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

/// Prefixes the field path of client errors raised for a nested value.
fn at_path(prefix: &str, mut e: ApiError) -> ApiError {
    if e.is_client_error() {
        e.body.field_path = Some(match e.body.field_path.take() {
            Some(p) => format!("{prefix}.{p}"),
            None => prefix.to_string(),
        });
        if e.status == 422 {
            e.status = 400;
            e.body.code = "validation".into();
        }
    }
    e
}

/// Mean of the training parameters, clamped to the bounds.
pub fn model_mean(model: &ShadowModel) -> ParameterVector {
    model
        .parameter_specs
        .iter()
        .zip(&model.norm_stats.parameters)
        .map(|(s, c)| (s.name.clone(), s.clamp(c.mean)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IdempotencyRecord {
    key: String,
    scope: String,
    status: u16,
    body: Value,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub struct PreparedTraining {
    pub model_id: String,
    pub request: TrainRequest,
    pub dataset: Arc<DatasetEntry>,
    pub template: ProgramTemplate,
    pub init: TrainInit,
}

pub struct PreparedOptimization {
    pub run_id: String,
    pub request: OptimizeRequest,
    pub model: Arc<ModelDocument>,
    pub x_init: ParameterVector,
}

/// Outcome of ingesting one inbox file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InboxOutcome {
    pub file: String,
    pub result: Result<IngestResult, ErrorBody>,
}

pub struct App {
    store: Store,
    jobs: Jobs,
    thresholds: QualityThresholds,
    datasets: RwLock<HashMap<String, Arc<DatasetEntry>>>,
    models: RwLock<HashMap<String, Arc<ModelDocument>>>,
}

impl App {
    /// Opens the data directory, registers the gearbox program and fails
    /// jobs that a previous process left unfinished.
    pub fn open(data_dir: impl AsRef<Path>, thresholds: QualityThresholds) -> ApiResult<App> {
        thresholds.validate()?;
        let store = Store::open(data_dir.as_ref())?;
        let gearbox = gearbox_template();
        store.put_new(Kind::Program, &gearbox.id, &gearbox)?;
        let jobs = Jobs::recover(&store)?;
        Ok(App { store, jobs, thresholds, datasets: RwLock::default(), models: RwLock::default() })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn thresholds(&self) -> &QualityThresholds {
        &self.thresholds
    }

    // Programs

    pub fn create_program(&self, template: ProgramTemplate) -> ApiResult<ProgramTemplate> {
        check_id(&template.id)?;
        template.validate()?;
        if let Some(existing) = self.store.get::<ProgramTemplate>(Kind::Program, &template.id)? {
            if existing != template {
                return Err(ApiError::conflict(
                    "program.exists",
                    format!("program `{}` already exists with a different definition", template.id),
                ));
            }
            return Ok(existing);
        }
        self.store.put(Kind::Program, &template.id, &template)?;
        Ok(template)
    }

    pub fn programs(&self) -> ApiResult<Vec<ProgramTemplate>> {
        self.store.list(Kind::Program)
    }

    pub fn program(&self, id: &str) -> ApiResult<ProgramTemplate> {
        self.store.get(Kind::Program, id)?.ok_or_else(|| ApiError::not_found("program", id))
    }

    // Executions

    pub fn ingest(&self, records: Vec<ExecutionRecord>) -> ApiResult<IngestResult> {
        if records.is_empty() {
            return Err(ApiError::validation("executions.empty", "no executions in the request", None));
        }
        let mut templates: HashMap<String, ProgramTemplate> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if !templates.contains_key(&r.program_id) {
                let t = self.store.get::<ProgramTemplate>(Kind::Program, &r.program_id)?.ok_or_else(|| {
                    ApiError::validation(
                        "execution.unknown_program",
                        format!("program `{}` is not registered", r.program_id),
                        Some(format!("[{i}].program_id")),
                    )
                })?;
                templates.insert(r.program_id.clone(), t);
            }
            r.validate(&templates[&r.program_id]).map_err(|e| at_path(&format!("[{i}]"), e.into()))?;
        }
        let total = self.store.append_executions(&records)?;
        Ok(IngestResult { ingested: records.len(), total })
    }

    /// Ingests one JSON document or a stream of them (JSON lines).
    pub fn ingest_text(&self, body: &str) -> ApiResult<IngestResult> {
        let mut records = Vec::new();
        for (i, value) in serde_json::Deserializer::from_str(body).into_iter::<Value>().enumerate() {
            let value = value.map_err(|e| {
                ApiError::validation("request.malformed", format!("document {i}: invalid JSON: {e}"), Some(format!("[{i}]")))
            })?;
            let record: ExecutionRecord = parse_strict(value).map_err(|e| at_path(&format!("[{i}]"), e))?;
            records.push(record);
        }
        self.ingest(records)
    }

    pub fn executions(&self, query: &ExecutionQuery) -> ApiResult<ExecutionPage> {
        query.filter.validate()?;
        let all = self.store.executions();
        let matching: Vec<&ExecutionRecord> = all
            .iter()
            .filter(|r| query.program_id.as_ref().is_none_or(|p| &r.program_id == p) && query.filter.matches(r))
            .collect();
        let records = matching
            .iter()
            .skip(query.offset)
            .take(query.limit.unwrap_or(usize::MAX))
            .map(|r| (*r).clone())
            .collect();
        Ok(ExecutionPage { total: matching.len(), offset: query.offset, records })
    }

    /// Ingests every `*.jsonl`/`*.json` file in the inbox, moving each to
    /// `processed/` or, with an error note, to `rejected/`.
    pub fn scan_inbox(&self) -> ApiResult<Vec<InboxOutcome>> {
        let inbox = self.store.root().join(INBOX_DIR);
        let mut files: Vec<_> = fs::read_dir(&inbox)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl" || x == "json"))
            .collect();
        files.sort();
        let mut outcomes = Vec::new();
        for path in files {
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            let result = fs::read_to_string(&path).map_err(ApiError::from).and_then(|text| self.ingest_text(&text));
            let target = if result.is_ok() { "processed" } else { "rejected" };
            let dir = inbox.join(target);
            fs::create_dir_all(&dir)?;
            fs::rename(&path, dir.join(&name))?;
            if let Err(e) = &result {
                crate::store::write_atomic(&dir.join(format!("{name}.error.json")), shadowopt_core::model::to_json(&e.body).as_bytes())?;
            }
            outcomes.push(InboxOutcome { file: name, result: result.map_err(|e| e.body) });
        }
        Ok(outcomes)
    }

    // Datasets

    pub fn create_dataset(&self, req: CreateDataset) -> ApiResult<DatasetInfo> {
        let id = req.id.clone().unwrap_or_else(|| new_id("dataset"));
        check_id(&id)?;
        if self.store.exists(Kind::Dataset, &id) {
            return Err(ApiError::conflict("dataset.exists", format!("dataset `{id}` already exists")));
        }
        let template = self
            .store
            .get::<ProgramTemplate>(Kind::Program, &req.program_id)?
            .ok_or_else(|| ApiError::validation("program.not_found", format!("no program `{}`", req.program_id), Some("program_id".into())))?;
        let thresholds = req.thresholds.clone().unwrap_or_else(|| self.thresholds.clone());
        thresholds.validate().map_err(|e| at_path("thresholds", e.into()))?;
        let request = DatasetRequest { id: id.clone(), name: req.name.clone(), filter: req.filter.clone(), pad_length: req.pad_length };
        let executions = self.store.executions();
        let dataset = Dataset::build(&request, &template, executions.iter())?;
        let quality = analyze(&dataset, &template, &thresholds)?;
        if !quality.overall_ok && !req.override_quality {
            return Err(ApiError::domain(
                "dataset.quality_failed",
                format!("the dataset fails the quality checks ({}); set override to accept it", quality.issues.join(", ")),
            ));
        }
        let info = DatasetInfo {
            id: id.clone(),
            name: dataset.name.clone(),
            program_id: dataset.program_id.clone(),
            record_count: dataset.len(),
            pad_length: dataset.pad_length,
            dt: dataset.dt,
            filter: dataset.filter.clone(),
            norm_stats: dataset.norm_stats.clone(),
            mean_parameters: dataset.mean_parameters(&template),
            quality,
            override_quality: req.override_quality,
            created_at: Utc::now(),
        };
        let entry = DatasetEntry { info: info.clone(), dataset };
        if !self.store.put_new(Kind::Dataset, &id, &entry)? {
            return Err(ApiError::conflict("dataset.exists", format!("dataset `{id}` already exists")));
        }
        self.datasets.write().unwrap().insert(id, Arc::new(entry));
        Ok(info)
    }

    pub fn dataset_entry(&self, id: &str) -> ApiResult<Arc<DatasetEntry>> {
        if let Some(e) = self.datasets.read().unwrap().get(id) {
            return Ok(e.clone());
        }
        let entry: DatasetEntry = self.store.get(Kind::Dataset, id)?.ok_or_else(|| ApiError::not_found("dataset", id))?;
        let entry = Arc::new(entry);
        self.datasets.write().unwrap().insert(id.to_string(), entry.clone());
        Ok(entry)
    }

    pub fn dataset(&self, id: &str) -> ApiResult<DatasetInfo> {
        Ok(self.dataset_entry(id)?.info.clone())
    }

    pub fn datasets(&self) -> ApiResult<Vec<DatasetInfo>> {
        self.store.ids(Kind::Dataset)?.iter().map(|id| self.dataset(id)).collect()
    }

    pub fn quality(&self, id: &str) -> ApiResult<QualityReport> {
        Ok(self.dataset_entry(id)?.info.quality.clone())
    }

    pub fn summary(&self, id: &str) -> ApiResult<DistributionSummary> {
        let entry = self.dataset_entry(id)?;
        let template = self.program(&entry.dataset.program_id)?;
        Ok(distribution_summary(&entry.dataset, &template)?)
    }

    // Models

    pub fn prepare_training(&self, request: TrainRequest) -> ApiResult<PreparedTraining> {
        let model_id = request.id.clone().unwrap_or_else(|| new_id("model"));
        check_id(&model_id)?;
        if self.store.exists(Kind::Model, &model_id) {
            return Err(ApiError::conflict("model.exists", format!("model `{model_id}` already exists")));
        }
        request.hyperparams.validate().map_err(|e| at_path("hyperparams", e.into()))?;
        let dataset = self.dataset_entry(&request.dataset_id).map_err(|e| match e.status {
            404 => ApiError::validation(e.body.key.clone(), e.body.message.clone(), Some("dataset_id".into())),
            _ => e,
        })?;
        let template = self.program(&dataset.dataset.program_id)?;
        let base = |base_id: &str| {
            self.model(base_id)
                .map(|m| m.model.clone())
                .map_err(|e| ApiError::validation(e.body.key.clone(), e.body.message.clone(), Some("init.base_id".into())))
        };
        let init = match &request.init {
            InitRequest::Scratch => TrainInit::Scratch,
            InitRequest::AsIs { base_id } => TrainInit::AsIs(base(base_id)?),
            InitRequest::Finetune { base_id } => TrainInit::Finetune(base(base_id)?),
        };
        Ok(PreparedTraining { model_id, request, dataset, template, init })
    }

    /// Trains, classifies and persists; `observer` sees every epoch.
    pub fn run_training(
        &self,
        p: PreparedTraining,
        observer: impl FnMut(&EpochProgress) -> ControlFlow<()>,
    ) -> ApiResult<ModelDocument> {
        let hp = &p.request.hyperparams;
        let mut model = train(&p.model_id, &p.dataset.dataset, &p.template, hp, p.init, observer)?;
        model.name = p.request.name.clone().unwrap_or_else(|| p.model_id.clone());
        let verdict = classify(&model.training_log, hp, Some(&p.dataset.info.quality)).ok();
        let doc = ModelDocument {
            model,
            dataset_id: p.dataset.info.id.clone(),
            hyperparams: hp.clone(),
            verdict,
            created_at: Utc::now(),
        };
        if !self.store.put_new(Kind::Model, &p.model_id, &doc)? {
            return Err(ApiError::conflict("model.exists", format!("model `{}` already exists", p.model_id)));
        }
        self.models.write().unwrap().insert(p.model_id.clone(), Arc::new(doc.clone()));
        Ok(doc)
    }

    pub fn train_blocking(
        &self,
        request: TrainRequest,
        observer: impl FnMut(&EpochProgress) -> ControlFlow<()>,
    ) -> ApiResult<ModelDocument> {
        let prepared = self.prepare_training(request)?;
        self.run_training(prepared, observer)
    }

    /// Validates the request, then trains on a worker thread.
    pub fn submit_training(self: &Arc<Self>, request: TrainRequest) -> ApiResult<JobStatus> {
        let prepared = self.prepare_training(request)?;
        let handle = self.jobs.create(&self.store, JobKind::Train, &prepared.dataset.info.id, &prepared.model_id)?;
        self.spawn_job(handle.clone(), move |app, job| {
            app.run_training(prepared, |p| {
                let progress = if p.epochs == 0 { 1.0 } else { p.epoch as f64 / p.epochs as f64 };
                job.report(
                    progress,
                    PartialMetrics::Training { epoch: p.epoch, epochs: p.epochs, train_loss: p.train_loss, val_loss: p.val_loss },
                );
                if job.cancel_requested() {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .map(|_| ())
        });
        Ok(handle.status())
    }

    pub fn model(&self, id: &str) -> ApiResult<Arc<ModelDocument>> {
        if let Some(m) = self.models.read().unwrap().get(id) {
            return Ok(m.clone());
        }
        let doc: ModelDocument = self.store.get(Kind::Model, id)?.ok_or_else(|| ApiError::not_found("model", id))?;
        let doc = Arc::new(doc);
        self.models.write().unwrap().insert(id.to_string(), doc.clone());
        Ok(doc)
    }

    pub fn models(&self) -> ApiResult<Vec<ModelSummary>> {
        self.store.ids(Kind::Model)?.iter().map(|id| self.model(id).map(|m| ModelSummary::of(&m))).collect()
    }

    /// Trained models whose skill signature matches exactly.
    pub fn base_models(&self, skill_signature: Option<&str>) -> ApiResult<Vec<ModelSummary>> {
        let mut out = Vec::new();
        for id in self.store.ids(Kind::Model)? {
            let doc = self.model(&id)?;
            if doc.model.is_trained() && skill_signature.is_none_or(|s| s == doc.model.skill_signature) {
                out.push(ModelSummary::of(&doc));
            }
        }
        Ok(out)
    }

    pub fn diagnostics(&self, id: &str) -> ApiResult<DiagnosticsReport> {
        let doc = self.model(id)?;
        let log = &doc.model.training_log;
        Ok(DiagnosticsReport {
            model_id: id.to_string(),
            verdict: doc.verdict.clone(),
            train_loss: log.train_loss.clone(),
            val_loss: log.val_loss.clone(),
            smoothed_train_loss: smooth(&log.train_loss, SMOOTHING_WINDOW),
            smoothed_val_loss: smooth(&log.val_loss, SMOOTHING_WINDOW),
            metrics: log.metrics.clone(),
            held_out: log.held_out.clone(),
            aborted: log.aborted.clone(),
        })
    }

    pub fn lrp(&self, id: &str, request: LrpRequest) -> ApiResult<LrpResponse> {
        let doc = self.model(id)?;
        let x = request.x.unwrap_or_else(|| model_mean(&doc.model));
        let heads = request.heads.unwrap_or_else(|| TargetHead::ALL.to_vec());
        let mut reports = Vec::new();
        let mut head_bars = Vec::new();
        for head in heads {
            let report = relevance(&doc.model, &x, head).map_err(|e| {
                let e = ApiError::from(e);
                if e.status == 400 { at_path("x", e) } else { e }
            })?;
            head_bars.push(HeadRelevance {
                target_head: head,
                output_value: report.output_value,
                conservation_residual: report.conservation_residual,
                bars: bars(&report.relevances),
            });
            reports.push(report);
        }
        Ok(LrpResponse { model_id: id.to_string(), probe_x: x, reports, bars: head_bars })
    }

    pub fn predict(&self, id: &str, request: PredictRequest) -> ApiResult<Prediction> {
        let doc = self.model(id)?;
        doc.model.predict(&request.x).map_err(|e| at_path("x", e.into()))
    }

    // Optimization

    pub fn prepare_optimization(&self, request: OptimizeRequest) -> ApiResult<PreparedOptimization> {
        let run_id = request.id.clone().unwrap_or_else(|| new_id("run"));
        check_id(&run_id)?;
        if self.store.exists(Kind::Optimization, &run_id) {
            return Err(ApiError::conflict("optimization.exists", format!("optimization `{run_id}` already exists")));
        }
        request.spec.validate().map_err(|e| at_path("spec", e.into()))?;
        request.hyperparams.validate().map_err(|e| at_path("hyperparams", e.into()))?;
        let model = self.model(&request.model_id).map_err(|e| match e.status {
            404 => ApiError::validation(e.body.key.clone(), e.body.message.clone(), Some("model_id".into())),
            _ => e,
        })?;
        if !model.model.is_trained() {
            return Err(ApiError::domain("model.untrained", format!("model `{}` has not been trained", model.model.id)));
        }
        let x_init = request.x_init.clone().unwrap_or_else(|| model_mean(&model.model));
        model.model.template().check(&x_init).map_err(|e| at_path("x_init", e.into()))?;
        Ok(PreparedOptimization { run_id, request, model, x_init })
    }

    pub fn run_optimization(
        &self,
        p: PreparedOptimization,
        observer: impl FnMut(&IterationProgress) -> ControlFlow<()>,
    ) -> ApiResult<OptimizationDocument> {
        let run = optimize(&p.run_id, &p.model.model, &p.x_init, &p.request.spec, &p.request.hyperparams, observer)?;
        let comparison = compare_parameterizations(&run.x_init, &run.x_best, &p.model.model.template())?;
        let doc = OptimizationDocument { run, comparison, created_at: Utc::now() };
        if !self.store.put_new(Kind::Optimization, &p.run_id, &doc)? {
            return Err(ApiError::conflict("optimization.exists", format!("optimization `{}` already exists", p.run_id)));
        }
        Ok(doc)
    }

    pub fn optimize_blocking(
        &self,
        request: OptimizeRequest,
        observer: impl FnMut(&IterationProgress) -> ControlFlow<()>,
    ) -> ApiResult<OptimizationDocument> {
        let prepared = self.prepare_optimization(request)?;
        self.run_optimization(prepared, observer)
    }

    pub fn submit_optimization(self: &Arc<Self>, request: OptimizeRequest) -> ApiResult<JobStatus> {
        let prepared = self.prepare_optimization(request)?;
        let handle = self.jobs.create(&self.store, JobKind::Optimize, &prepared.model.model.id, &prepared.run_id)?;
        self.spawn_job(handle.clone(), move |app, job| {
            app.run_optimization(prepared, |p| {
                job.report(
                    (p.iteration as f64 / p.iterations as f64).min(1.0),
                    PartialMetrics::Optimization {
                        iteration: p.iteration,
                        iterations: p.iterations,
                        total: p.total,
                        best_total: p.best_total,
                    },
                );
                if job.cancel_requested() {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .map(|_| ())
        });
        Ok(handle.status())
    }

    pub fn optimization(&self, id: &str) -> ApiResult<OptimizationDocument> {
        self.store.get(Kind::Optimization, id)?.ok_or_else(|| ApiError::not_found("optimization", id))
    }

    pub fn what_if(&self, request: WhatIfRequest) -> ApiResult<WhatIf> {
        let model = self.model(&request.model_id).map_err(|e| match e.status {
            404 => ApiError::validation(e.body.key.clone(), e.body.message.clone(), Some("model_id".into())),
            _ => e,
        })?;
        request.spec.validate().map_err(|e| at_path("spec", e.into()))?;
        what_if(&model.model, &request.x, &request.spec).map_err(|e| at_path("x", e.into()))
    }

    // Jobs

    fn spawn_job(
        self: &Arc<Self>,
        handle: Arc<JobHandle>,
        work: impl FnOnce(&App, &JobHandle) -> ApiResult<()> + Send + 'static,
    ) {
        let app = self.clone();
        std::thread::spawn(move || {
            let finish = |state: JobState, error: Option<ErrorBody>| {
                if let Err(e) = app.jobs.transition(&app.store, &handle, state, error) {
                    tracing::error!("job {}: {e}", handle.status().id);
                }
            };
            if handle.cancel_requested() {
                return finish(JobState::Cancelled, None);
            }
            finish(JobState::Running, None);
            match work(&app, &handle) {
                Ok(()) => finish(JobState::Done, None),
                Err(e) if e.key() == "job.cancelled" => finish(JobState::Cancelled, Some(e.body)),
                Err(e) => finish(JobState::Failed, Some(e.body)),
            }
        });
    }

    pub fn job(&self, id: &str) -> ApiResult<JobStatus> {
        self.jobs.get(id).map(|h| h.status()).ok_or_else(|| ApiError::not_found("job", id))
    }

    pub fn jobs(&self) -> Vec<JobStatus> {
        self.jobs.list()
    }

    pub fn cancel_job(&self, id: &str) -> ApiResult<JobStatus> {
        self.jobs.request_cancel(id)
    }

    // Sessions

    pub fn create_session(&self, req: CreateSession) -> ApiResult<WorkflowSession> {
        let id = req.id.clone().unwrap_or_else(|| new_id("session"));
        check_id(&id)?;
        let template = self
            .store
            .get::<ProgramTemplate>(Kind::Program, &req.program_id)?
            .ok_or_else(|| ApiError::validation("program.not_found", format!("no program `{}`", req.program_id), Some("program_id".into())))?;
        let target_skills = req.target_skills.clone().unwrap_or_else(|| template.skill_sequence.clone());
        if target_skills.is_empty() {
            return Err(ApiError::validation("session.invalid", "target_skills is empty", Some("target_skills".into())));
        }
        if let Some(i) = target_skills.iter().position(|s| !template.skill_sequence.contains(s)) {
            return Err(ApiError::validation(
                "session.invalid",
                format!("skill {:?} is not part of program `{}`", target_skills[i], template.id),
                Some(format!("target_skills[{i}]")),
            ));
        }
        let now = Utc::now();
        let session = WorkflowSession {
            id: id.clone(),
            program_id: template.id,
            target_skills,
            current_step: WorkflowStep::Dataset,
            dataset_id: None,
            model_ids: Vec::new(),
            run_ids: Vec::new(),
            created_at: now,
            updated_at: now,
        };
        if !self.store.put_new(Kind::Session, &id, &session)? {
            return Err(ApiError::conflict("session.exists", format!("session `{id}` already exists")));
        }
        Ok(session)
    }

    pub fn session(&self, id: &str) -> ApiResult<WorkflowSession> {
        self.store.get(Kind::Session, id)?.ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn sessions(&self) -> ApiResult<Vec<WorkflowSession>> {
        self.store.list(Kind::Session)
    }

    /// Moves to the same or an adjacent step. Entering training needs a
    /// dataset, entering optimization needs a model.
    pub fn step_session(&self, id: &str, req: StepRequest) -> ApiResult<WorkflowSession> {
        let mut s = self.session(id)?;
        if req.step.index().abs_diff(s.current_step.index()) > 1 {
            return Err(ApiError::conflict(
                "session.illegal_transition",
                format!("cannot jump from {:?} to {:?}", s.current_step, req.step),
            ));
        }
        if let Some(d) = &req.dataset_id {
            self.dataset_entry(d)?;
            s.dataset_id = Some(d.clone());
        }
        if let Some(m) = &req.model_id {
            self.model(m)?;
            if !s.model_ids.contains(m) {
                s.model_ids.push(m.clone());
            }
        }
        if let Some(r) = &req.run_id {
            self.optimization(r)?;
            if !s.run_ids.contains(r) {
                s.run_ids.push(r.clone());
            }
        }
        let ready = match req.step {
            WorkflowStep::Dataset => true,
            WorkflowStep::Training => s.dataset_id.is_some(),
            WorkflowStep::Optimization => s.dataset_id.is_some() && !s.model_ids.is_empty(),
        };
        if !ready {
            return Err(ApiError::conflict(
                "session.step_incomplete",
                format!("the {:?} step needs the previous steps' results bound first", req.step),
            ));
        }
        s.current_step = req.step;
        s.updated_at = Utc::now();
        self.store.put(Kind::Session, id, &s)?;
        Ok(s)
    }

    // Idempotency

    /// Runs `f` once per key; later calls with the key replay the stored
    /// response. Reusing a key for a different request is a conflict.
    pub fn idempotent(
        &self,
        key: Option<&str>,
        scope: &str,
        f: impl FnOnce() -> ApiResult<(u16, Value)>,
    ) -> ApiResult<(u16, Value)> {
        let Some(key) = key else { return f() };
        let id = format!("{:016x}", fnv1a(key));
        if let Some(rec) = self.store.get::<IdempotencyRecord>(Kind::Idempotency, &id)? {
            if rec.key == key {
                if rec.scope != scope {
                    return Err(ApiError::conflict(
                        "idempotency.key_reused",
                        format!("idempotency key was first used for {}", rec.scope),
                    ));
                }
                return Ok((rec.status, rec.body));
            }
        }
        let (status, body) = f()?;
        let rec = IdempotencyRecord { key: key.to_string(), scope: scope.to_string(), status, body: body.clone() };
        self.store.put(Kind::Idempotency, &id, &rec)?;
        Ok((status, body))
    }
}
