//! The scripted gearbox workflow: simulate, ingest, build a dataset, train,
//! explain, optimize and check the result on the noiseless simulator.

use std::ops::ControlFlow;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use shadowopt_core::lrp::HeadRelevance;
use shadowopt_core::model::{DatasetFilter, ExecutionRecord, ParameterVector};
use shadowopt_core::net::{TrainHyperparams, ValidationMetrics};
use shadowopt_core::optimizer::{evaluate_outcome, objective_value, ObjectiveSpec, ObjectiveValues, OptimizerHyperparams, Outcome};
use shadowopt_core::scenario::{demo_config, demo_spec, DEMO_RECORDS};
use shadowopt_core::sim::{batch_execute, execute, ParamRanges, Sampling, SimConfig, SimParameters};

use crate::app::App;
use crate::dto::*;
use crate::error::ApiResult;

pub const DEMO_TAG: &str = "batch";

pub fn demo_batch(seed: u64) -> String {
    format!("demo-{seed}")
}

/// Demo executions, tagged so the dataset filter selects exactly them.
pub fn demo_records(seed: u64) -> ApiResult<Vec<ExecutionRecord>> {
    let mut records = batch_execute(DEMO_RECORDS, &Sampling::UniformRandom, &ParamRanges::full(), &demo_config(), seed)?;
    for r in &mut records {
        r.trajectory.tags.insert(DEMO_TAG.into(), demo_batch(seed));
    }
    Ok(records)
}

pub fn demo_dataset_request(seed: u64) -> CreateDataset {
    let mut filter = DatasetFilter::default();
    filter.tag_equals.insert(DEMO_TAG.into(), demo_batch(seed));
    CreateDataset {
        id: None,
        name: demo_batch(seed),
        program_id: shadowopt_core::sim::PROGRAM_ID.into(),
        filter,
        pad_length: None,
        override_quality: false,
        thresholds: None,
    }
}

pub fn demo_hyperparams(seed: u64) -> TrainHyperparams {
    TrainHyperparams { seed, ..Default::default() }
}

pub fn demo_optimizer_hyperparams(seed: u64) -> OptimizerHyperparams {
    OptimizerHyperparams { seed, ..Default::default() }
}

/// Objective of the parameters as executed on the demo cell with the hole
/// centred and force noise off.
pub fn simulated_objectives(x: &ParameterVector, spec: &ObjectiveSpec) -> ApiResult<ObjectiveValues> {
    let config = SimConfig { hole_offset_sigma: 0.0, noise_amp: 0.0, ..demo_config() };
    let record = execute(&SimParameters::from_vector(x)?, &config, 0)?;
    Ok(evaluate_outcome(&Outcome::from_trajectory(&record.trajectory), spec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DemoReport {
    pub seed: u64,
    pub dataset_id: String,
    pub model_id: String,
    pub run_id: String,
    pub records: usize,
    pub quality_ok: bool,
    pub verdict: Option<String>,
    pub metrics: Option<ValidationMetrics>,
    pub relevance: Vec<HeadRelevance>,
    pub spec: ObjectiveSpec,
    pub x_init: ParameterVector,
    pub x_best: ParameterVector,
    pub best_index: usize,
    pub predicted_init: ObjectiveValues,
    pub predicted_best: ObjectiveValues,
    pub simulated_init: ObjectiveValues,
    pub simulated_best: ObjectiveValues,
    /// `1 - simulated_best.total / simulated_init.total`.
    pub simulated_improvement: f64,
}

/// Progress lines for long steps.
pub trait DemoProgress {
    fn step(&mut self, _message: &str) {}
    fn epoch(&mut self, _epoch: usize, _epochs: usize, _train_loss: f64, _val_loss: f64) {}
}

pub struct Quiet;

impl DemoProgress for Quiet {}

pub fn run_demo(app: &App, seed: u64, progress: &mut dyn DemoProgress) -> ApiResult<DemoReport> {
    let request = demo_dataset_request(seed);
    let existing = app.executions(&ExecutionQuery {
        program_id: Some(request.program_id.clone()),
        filter: request.filter.clone(),
        offset: 0,
        limit: Some(0),
    })?;
    if existing.total == 0 {
        progress.step("simulating executions");
        app.ingest(demo_records(seed)?)?;
    }
    progress.step("building dataset");
    let dataset = app.create_dataset(request)?;
    progress.step("training shadow model");
    let model = app.train_blocking(
        TrainRequest {
            id: None,
            name: Some(demo_batch(seed)),
            dataset_id: dataset.id.clone(),
            init: InitRequest::Scratch,
            hyperparams: demo_hyperparams(seed),
        },
        |p| {
            progress.epoch(p.epoch, p.epochs, p.train_loss, p.val_loss);
            ControlFlow::Continue(())
        },
    )?;
    let lrp = app.lrp(&model.model.id, LrpRequest::default())?;
    progress.step("optimizing parameters");
    let spec = demo_spec();
    let run = app.optimize_blocking(
        OptimizeRequest {
            id: None,
            model_id: model.model.id.clone(),
            x_init: None,
            spec: spec.clone(),
            hyperparams: demo_optimizer_hyperparams(seed),
        },
        |_| ControlFlow::Continue(()),
    )?;
    progress.step("verifying on the simulator");
    report(&dataset, &model, lrp.bars, &run)
}

/// Assembles the report from the documents the workflow produced, so the
/// CLI and an HTTP client derive it identically.
pub fn report(
    dataset: &DatasetInfo,
    model: &ModelDocument,
    relevance: Vec<HeadRelevance>,
    run: &OptimizationDocument,
) -> ApiResult<DemoReport> {
    let r = &run.run;
    let simulated_init = simulated_objectives(&r.x_init, &r.spec)?;
    let simulated_best = simulated_objectives(&r.x_best, &r.spec)?;
    Ok(DemoReport {
        seed: model.hyperparams.seed,
        dataset_id: dataset.id.clone(),
        model_id: model.model.id.clone(),
        run_id: r.id.clone(),
        records: dataset.record_count,
        quality_ok: dataset.quality.overall_ok,
        verdict: model.verdict.as_ref().map(|v| v.label.as_str().to_string()),
        metrics: model.model.training_log.metrics.clone(),
        relevance,
        spec: r.spec.clone(),
        x_init: r.x_init.clone(),
        x_best: r.x_best.clone(),
        best_index: r.best_index,
        predicted_init: r.iterations[0].objectives.clone(),
        predicted_best: objective_value(&r.best_prediction, &r.spec),
        simulated_improvement: 1.0 - simulated_best.total / simulated_init.total,
        simulated_init,
        simulated_best,
    })
}
