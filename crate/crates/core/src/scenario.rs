//! Seeded end-to-end scenarios: the demo workcell and the training runs
//! used to exercise the diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use crate::diagnostics::{classify, TrainingVerdict};
use crate::error::Result;
use crate::model::{Dataset, DatasetRequest, ExecutionRecord};
use crate::net::{train, TrainHyperparams, TrainInit};
use crate::optimizer::ObjectiveSpec;
use crate::quality::{analyze, QualityThresholds};
use crate::sim::{batch_execute, derive_seed, gearbox_template, ParamRanges, Sampling, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagnosticsScenario {
    Baseline,
    TinyDataLargeNet,
    SingleUnit,
    HeavyDropout,
    ShuffledLabels,
}

impl DiagnosticsScenario {
    pub const ALL: [DiagnosticsScenario; 5] = [
        DiagnosticsScenario::Baseline,
        DiagnosticsScenario::TinyDataLargeNet,
        DiagnosticsScenario::SingleUnit,
        DiagnosticsScenario::HeavyDropout,
        DiagnosticsScenario::ShuffledLabels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiagnosticsScenario::Baseline => "baseline",
            DiagnosticsScenario::TinyDataLargeNet => "tiny_data_large_net",
            DiagnosticsScenario::SingleUnit => "single_unit",
            DiagnosticsScenario::HeavyDropout => "heavy_dropout",
            DiagnosticsScenario::ShuffledLabels => "shuffled_labels",
        }
    }
}

pub const DEMO_SEED: u64 = 7;
pub const DEMO_RECORDS: usize = 500;
pub const DEMO_DT: f64 = 0.05;
pub const DEMO_FORCE_LIMIT: f64 = 25.0;

/// The demo cell: default physics sampled every 50 ms, so the impact
/// spike spans several samples instead of one.
pub fn demo_config() -> SimConfig {
    SimConfig { dt: DEMO_DT, ..Default::default() }
}

/// Demo objective: cycle time, success and a force limit at the break force.
pub fn demo_spec() -> ObjectiveSpec {
    ObjectiveSpec::time_success_force(DEMO_FORCE_LIMIT)
}

/// Coarse sampling keeps the scenario trainings cheap.
pub const SCENARIO_DT: f64 = 0.1;
pub const SCENARIO_PAD: usize = 120;
pub const SCENARIO_RECORDS: usize = 1000;
pub const SCENARIO_TINY_RECORDS: usize = 32;
/// Long enough for the large net to memorize the tiny training split.
pub const SCENARIO_TINY_EPOCHS: usize = 1500;

/// Clean cell: a nearly centred hole and no force noise.
pub fn scenario_config() -> SimConfig {
    SimConfig {
        dt: SCENARIO_DT,
        hole_offset_sigma: 0.05,
        noise_amp: 0.0,
        ..Default::default()
    }
}

pub fn scenario_setup(scenario: DiagnosticsScenario, repetition: u64) -> Result<(Dataset, TrainHyperparams)> {
    let config = scenario_config();
    let data_seed = derive_seed(1000, repetition, 21);
    let n = match scenario {
        DiagnosticsScenario::TinyDataLargeNet => SCENARIO_TINY_RECORDS,
        _ => SCENARIO_RECORDS,
    };
    let mut records = batch_execute(n, &Sampling::UniformRandom, &ParamRanges::full(), &config, data_seed)?;
    if scenario == DiagnosticsScenario::ShuffledLabels {
        shuffle_labels(&mut records, derive_seed(data_seed, 0, 22));
    }
    let template = gearbox_template();
    let request = DatasetRequest {
        id: format!("scenario-{}-{repetition}", scenario.name()),
        name: scenario.name().into(),
        pad_length: Some(SCENARIO_PAD),
        ..Default::default()
    };
    let dataset = Dataset::from_records(&request, &template, records)?;
    let mut hp = TrainHyperparams { seed: repetition, ..Default::default() };
    match scenario {
        DiagnosticsScenario::Baseline | DiagnosticsScenario::ShuffledLabels => {}
        DiagnosticsScenario::TinyDataLargeNet => {
            hp.hidden_layers = vec![256, 256];
            hp.dropout_rate = 0.0;
            hp.val_fraction = 0.25;
            hp.epochs = SCENARIO_TINY_EPOCHS;
        }
        DiagnosticsScenario::SingleUnit => hp.hidden_layers = vec![1],
        DiagnosticsScenario::HeavyDropout => hp.dropout_rate = 0.9,
    }
    Ok((dataset, hp))
}

/// Permutes the trajectories across records so labels no longer depend on
/// the parameters.
pub fn shuffle_labels(records: &mut [ExecutionRecord], seed: u64) {
    let mut trajectories: Vec<_> = records.iter().map(|r| r.trajectory.clone()).collect();
    trajectories.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (r, t) in records.iter_mut().zip(trajectories) {
        r.trajectory = t;
    }
}

pub fn run_scenario(scenario: DiagnosticsScenario, repetition: u64) -> Result<TrainingVerdict> {
    let (dataset, hp) = scenario_setup(scenario, repetition)?;
    let template = gearbox_template();
    let model = train("scenario", &dataset, &template, &hp, TrainInit::Scratch, |_| std::ops::ControlFlow::Continue(()))?;
    let quality = analyze(&dataset, &template, &QualityThresholds::default())?;
    classify(&model.training_log, &hp, Some(&quality))
}
