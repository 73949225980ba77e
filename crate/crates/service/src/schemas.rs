//! Published JSON schemas of every response document.

use indexmap::IndexMap;
use schemars::{schema_for, Schema};
use shadowopt_core::diagnostics::TrainingVerdict;
use shadowopt_core::model::{ExecutionRecord, ProgramTemplate};
use shadowopt_core::net::Prediction;
use shadowopt_core::optimizer::WhatIf;
use shadowopt_core::quality::{DistributionSummary, QualityReport};

use crate::capabilities::CapabilityDescriptor;
use crate::demo::DemoReport;
use crate::dto::*;
use crate::error::ErrorBody;
use crate::jobs::JobStatus;

pub fn all() -> IndexMap<&'static str, Schema> {
    let mut m = IndexMap::new();
    m.insert("error", schema_for!(ErrorBody));
    m.insert("program", schema_for!(ProgramTemplate));
    m.insert("program_list", schema_for!(Vec<ProgramTemplate>));
    m.insert("execution", schema_for!(ExecutionRecord));
    m.insert("ingest_result", schema_for!(IngestResult));
    m.insert("execution_page", schema_for!(ExecutionPage));
    m.insert("dataset", schema_for!(DatasetInfo));
    m.insert("dataset_list", schema_for!(Vec<DatasetInfo>));
    m.insert("quality_report", schema_for!(QualityReport));
    m.insert("distribution_summary", schema_for!(DistributionSummary));
    m.insert("job", schema_for!(JobStatus));
    m.insert("job_list", schema_for!(Vec<JobStatus>));
    m.insert("model", schema_for!(ModelDocument));
    m.insert("model_list", schema_for!(Vec<ModelSummary>));
    m.insert("training_verdict", schema_for!(TrainingVerdict));
    m.insert("diagnostics", schema_for!(DiagnosticsReport));
    m.insert("lrp", schema_for!(LrpResponse));
    m.insert("prediction", schema_for!(Prediction));
    m.insert("optimization", schema_for!(OptimizationDocument));
    m.insert("what_if", schema_for!(WhatIf));
    m.insert("capabilities", schema_for!(CapabilityDescriptor));
    m.insert("session", schema_for!(WorkflowSession));
    m.insert("session_list", schema_for!(Vec<WorkflowSession>));
    m.insert("demo_report", schema_for!(DemoReport));
    m
}
