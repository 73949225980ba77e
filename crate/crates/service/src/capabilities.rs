//! The Guided/Expert capability descriptor.
//!
//! The server exposes every tunable field with its default, bounds and an
//! `expert_only` flag; Guided clients render only the fields without it and
//! submit nothing else.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shadowopt_core::net::TrainHyperparams;
use shadowopt_core::optimizer::{ObjectiveSpec, OptimizerHyperparams};

use crate::dto::WorkflowStep;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Boolean,
    Integer,
    Number,
    String,
    IntegerList,
    Timestamp,
    StringMap,
    Enum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FieldDescriptor {
    /// Dotted path of the field in the step's request body.
    pub name: String,
    #[serde(rename = "type")]
    pub field_type: FieldType,
    /// `null` when the field has no default.
    pub default: Value,
    /// Numeric range; for integer lists it bounds every element.
    pub bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub expert_only: bool,
    pub explanation_key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StepCapabilities {
    pub step: WorkflowStep,
    /// Request the fields belong to, e.g. `POST /models`.
    pub endpoint: String,
    pub fields: Vec<FieldDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CapabilityDescriptor {
    pub modes: Vec<String>,
    pub steps: Vec<StepCapabilities>,
}

fn lookup(doc: &Value, path: &str) -> Value {
    path.split('.').try_fold(doc, |v, k| v.get(k)).cloned().unwrap_or(Value::Null)
}

struct Builder {
    step: &'static str,
    defaults: Value,
    fields: Vec<FieldDescriptor>,
}

impl Builder {
    fn new(step: &'static str, defaults: Value) -> Self {
        Builder { step, defaults, fields: Vec::new() }
    }

    fn add(mut self, name: &str, field_type: FieldType, bounds: Option<(f64, f64)>, expert_only: bool) -> Self {
        self.fields.push(FieldDescriptor {
            name: name.into(),
            field_type,
            default: lookup(&self.defaults, name),
            bounds: bounds.map(|(min, max)| Bounds { min, max }),
            options: Vec::new(),
            expert_only,
            explanation_key: format!("capability.{}.{name}", self.step),
        });
        self
    }

    fn options(mut self, options: &[&str]) -> Self {
        self.fields.last_mut().expect("a field was added").options = options.iter().map(|s| s.to_string()).collect();
        self
    }
}

pub fn descriptor() -> CapabilityDescriptor {
    use FieldType::*;
    let dataset_defaults = serde_json::json!({
        "name": null,
        "pad_length": null,
        "filter": {"time_from": null, "time_to": null, "tag_equals": {}},
        "override": false,
    });
    let dataset = Builder::new("dataset", dataset_defaults)
        .add("name", String, None, false)
        .add("filter.time_from", Timestamp, None, false)
        .add("filter.time_to", Timestamp, None, false)
        .add("filter.tag_equals", StringMap, None, false)
        .add("pad_length", Integer, Some((1.0, 4096.0)), true)
        .add("override", Boolean, None, true);

    let training_defaults = serde_json::json!({
        "init": {"kind": "scratch", "base_id": null},
        "hyperparams": TrainHyperparams::default(),
    });
    let training = Builder::new("training", training_defaults)
        .add("init.kind", Enum, None, false)
        .options(&["scratch", "as_is", "finetune"])
        .add("init.base_id", String, None, false)
        .add("hyperparams.learning_rate", Number, Some((1e-6, 1.0)), false)
        .add("hyperparams.epochs", Integer, Some((0.0, 10_000.0)), false)
        .add("hyperparams.batch_size", Integer, Some((1.0, 4096.0)), true)
        .add("hyperparams.val_fraction", Number, Some((0.05, 0.95)), true)
        .add("hyperparams.dropout_rate", Number, Some((0.0, 0.95)), true)
        .add("hyperparams.weight_decay", Number, Some((0.0, 1.0)), true)
        .add("hyperparams.seed", Integer, Some((0.0, 9_007_199_254_740_991.0)), true)
        .add("hyperparams.hidden_layers", IntegerList, Some((1.0, 1024.0)), true);

    let optimization_defaults = serde_json::json!({
        "spec": ObjectiveSpec::default(),
        "hyperparams": OptimizerHyperparams::default(),
    });
    let mut optimization = Builder::new("optimization", optimization_defaults);
    for term in ["cycle_time", "path_length", "success", "force_threshold"] {
        optimization = optimization
            .add(&format!("spec.{term}.enabled"), Boolean, None, false)
            .add(&format!("spec.{term}.weight"), Number, Some((0.0, 10.0)), true);
    }
    let optimization = optimization
        .add("spec.force_threshold.f_max", Number, Some((0.0, 1000.0)), false)
        .add("hyperparams.step_size", Number, Some((0.0, 10.0)), true)
        .add("hyperparams.iterations", Integer, Some((1.0, 10_000.0)), true)
        .add("hyperparams.seed", Integer, Some((0.0, 9_007_199_254_740_991.0)), true);

    let step = |step, endpoint: &str, b: Builder| StepCapabilities { step, endpoint: endpoint.into(), fields: b.fields };
    CapabilityDescriptor {
        modes: vec!["guided".into(), "expert".into()],
        steps: vec![
            step(WorkflowStep::Dataset, "POST /datasets", dataset),
            step(WorkflowStep::Training, "POST /models", training),
            step(WorkflowStep::Optimization, "POST /optimizations", optimization),
        ],
    }
}
