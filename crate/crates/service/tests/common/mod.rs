#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use shadowopt_core::model::ExecutionRecord;
use shadowopt_core::quality::QualityThresholds;
use shadowopt_core::sim::{batch_execute, ParamRanges, Sampling, SimConfig};
use shadowopt_service::{http, App};
use tower::ServiceExt;

pub fn config() -> SimConfig {
    SimConfig { dt: 0.05, ..Default::default() }
}

pub fn records(n: usize, seed: u64) -> Vec<ExecutionRecord> {
    batch_execute(n, &Sampling::UniformRandom, &ParamRanges::full(), &config(), seed).unwrap()
}

pub fn jsonl(records: &[ExecutionRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

pub struct Client {
    pub app: Arc<App>,
    pub dir: tempfile::TempDir,
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Value,
    pub bytes: Vec<u8>,
}

impl Client {
    pub fn new() -> Client {
        let dir = tempfile::tempdir().unwrap();
        let app = Arc::new(App::open(dir.path(), QualityThresholds::default()).unwrap());
        Client { app, dir }
    }

    /// Reopens the data directory as a fresh process would.
    pub fn restart(self) -> Client {
        let Client { app, dir } = self;
        drop(app);
        let app = Arc::new(App::open(dir.path(), QualityThresholds::default()).unwrap());
        Client { app, dir }
    }

    pub async fn send(&self, method: &str, uri: &str, body: Option<String>, headers: &[(&str, &str)]) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
        let resp = http::router(self.app.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        Reply { status, body, bytes }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.send("GET", uri, None, &[]).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> Reply {
        self.send("POST", uri, Some(body.to_string()), &[]).await
    }

    pub async fn ingest(&self, records: &[ExecutionRecord]) -> Reply {
        self.send("POST", "/executions", Some(jsonl(records)), &[]).await
    }

    /// Polls a job until it reaches a terminal state.
    pub async fn wait_job(&self, id: &str) -> Value {
        for _ in 0..6000 {
            let r = self.get(&format!("/jobs/{id}")).await;
            assert_eq!(r.status, StatusCode::OK);
            if matches!(r.body["state"].as_str(), Some("done" | "failed" | "cancelled")) {
                return r.body;
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        }
        panic!("job {id} did not finish");
    }
}

/// Validates a response against a published schema.
pub fn assert_schema(name: &str, instance: &Value) {
    let schema = serde_json::to_value(&shadowopt_service::schemas::all()[name]).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}
