mod common;

use axum::http::StatusCode;
use common::{assert_schema, records, Client};
use serde_json::{json, Value};

async fn dataset(c: &Client, n: usize) -> Value {
    let r = c.ingest(&records(n, 3)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_schema("ingest_result", &r.body);
    let r = c.post("/datasets", json!({"name": "d"})).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_schema("dataset", &r.body);
    r.body
}

async fn trained_model(c: &Client, dataset_id: &str, epochs: usize) -> Value {
    let body = json!({"dataset_id": dataset_id, "hyperparams": {"epochs": epochs, "hidden_layers": [16]}});
    let r = c.post("/models", body).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.body);
    assert_schema("job", &r.body);
    let job = c.wait_job(r.body["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_schema("job", &job);
    let r = c.get(&format!("/models/{}", job["result_id"].as_str().unwrap())).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_schema("model", &r.body);
    r.body
}

#[tokio::test(flavor = "multi_thread")]
async fn full_workflow_responses_match_their_schemas() {
    let c = Client::new();
    let d = dataset(&c, 80).await;
    let id = d["id"].as_str().unwrap();
    for (uri, schema) in [
        (format!("/datasets/{id}/quality"), "quality_report"),
        (format!("/datasets/{id}/summary"), "distribution_summary"),
        ("/datasets".to_string(), "dataset_list"),
        ("/programs".to_string(), "program_list"),
        ("/programs/gearbox_insertion".to_string(), "program"),
        ("/executions?limit=2".to_string(), "execution_page"),
        ("/capabilities".to_string(), "capabilities"),
    ] {
        let r = c.get(&uri).await;
        assert_eq!(r.status, StatusCode::OK, "{uri}");
        assert_schema(schema, &r.body);
    }

    let model = trained_model(&c, id, 30).await;
    let mid = model["model"]["id"].as_str().unwrap();
    let r = c.get(&format!("/models/{mid}/diagnostics")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_schema("diagnostics", &r.body);
    let r = c.send("POST", &format!("/models/{mid}/lrp"), None, &[]).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_schema("lrp", &r.body);
    assert_eq!(r.body["reports"].as_array().unwrap().len(), 3);
    let x = d["mean_parameters"].clone();
    let r = c.post(&format!("/models/{mid}/predict"), json!({"x": x})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_schema("prediction", &r.body);
    let r = c.post("/whatif", json!({"model_id": mid, "x": x})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_schema("what_if", &r.body);
    let r = c.get("/models").await;
    assert_schema("model_list", &r.body);
    let r = c.get(&format!("/models/base?skill_signature={}", model["model"]["skill_signature"].as_str().unwrap().replace('+', "%2B").replace('|', "%7C"))).await;
    assert_eq!(r.body.as_array().unwrap().len(), 1);

    let r = c.post("/optimizations", json!({"model_id": mid, "hyperparams": {"iterations": 20}})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.body);
    let job = c.wait_job(r.body["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    let r = c.get(&format!("/optimizations/{}", job["result_id"].as_str().unwrap())).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_schema("optimization", &r.body);
    assert_eq!(r.body["run"]["iterations"].as_array().unwrap().len(), 21);
    let r = c.get("/jobs").await;
    assert_schema("job_list", &r.body);
    assert_eq!(r.body.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn unknown_fields_are_rejected_with_their_path() {
    let c = Client::new();
    let r = c.post("/datasets", json!({"name": "d", "filter": {"tag_equal": {}}})).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_schema("error", &r.body);
    assert_eq!(r.body["code"], "validation");
    assert_eq!(r.body["key"], "request.unknown_field");
    assert_eq!(r.body["field_path"], "filter.tag_equal");

    let r = c.post("/models", json!({"dataset_id": "x", "hyperparams": {"epochs": "many"}})).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.body["field_path"], "hyperparams.epochs");

    let r = c.send("POST", "/datasets", Some("{not json".into()), &[]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.body["key"], "request.malformed");
}

#[tokio::test]
async fn bad_queries_and_missing_entities() {
    let c = Client::new();
    let r = c.get("/executions?colour=red").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.body["field_path"], "colour");
    let r = c.get("/executions?time_from=yesterday").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = c.get("/models/nope").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.body["key"], "model.not_found");
    assert_schema("error", &r.body);
    let r = c.get("/no/such/route").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.body["code"], "not_found");
    let r = c.get("/schemas/nope").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = c.get("/datasets/..%2Fetc").await;
    assert!(r.status.is_client_error());
}

#[tokio::test]
async fn empty_dataset_is_a_domain_error() {
    let c = Client::new();
    c.ingest(&records(10, 1)).await;
    let r = c.post("/datasets", json!({"name": "d", "filter": {"tag_equals": {"batch": "none"}}})).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{}", r.body);
    assert_eq!(r.body["code"], "domain_rule");
    assert_eq!(r.body["key"], "dataset.empty");
}

#[tokio::test]
async fn failing_quality_needs_override() {
    let c = Client::new();
    c.ingest(&records(3, 1)).await;
    let r = c.post("/datasets", json!({"name": "d"})).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{}", r.body);
    assert_eq!(r.body["key"], "dataset.quality_failed");
    let r = c.post("/datasets", json!({"name": "d", "override": true})).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_eq!(r.body["override"], true);
    assert_eq!(r.body["quality"]["overall_ok"], false);
}

#[tokio::test]
async fn ingest_rejects_a_bad_line_atomically() {
    let c = Client::new();
    let recs = records(3, 1);
    let mut text = common::jsonl(&recs);
    text.push_str("{\"bogus\": 1}\n");
    let r = c.send("POST", "/executions", Some(text), &[]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.body["field_path"].as_str().unwrap().starts_with("[3]"), "{}", r.body);
    let r = c.get("/executions").await;
    assert_eq!(r.body["total"], 0);
}

#[tokio::test]
async fn execution_paging_and_tag_filter() {
    let c = Client::new();
    let mut recs = records(10, 1);
    for (i, r) in recs.iter_mut().enumerate() {
        r.trajectory.tags.insert("cell".into(), if i % 2 == 0 { "a" } else { "b" }.into());
    }
    c.ingest(&recs).await;
    let r = c.get("/executions?tag.cell=a&offset=1&limit=2").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["total"], 5);
    let page = r.body["records"].as_array().unwrap();
    assert_eq!(page.len(), 2);
    assert_eq!(page[0], serde_json::to_value(&recs[2]).unwrap());
}

#[tokio::test]
async fn idempotency_key_replays_and_guards_scope() {
    let c = Client::new();
    c.ingest(&records(40, 1)).await;
    let body = json!({"name": "d"}).to_string();
    let key = [("Idempotency-Key", "abc-1")];
    let a = c.send("POST", "/datasets", Some(body.clone()), &key).await;
    let b = c.send("POST", "/datasets", Some(body.clone()), &key).await;
    assert_eq!(a.status, StatusCode::CREATED);
    assert_eq!(a.status, b.status);
    assert_eq!(a.bytes, b.bytes);
    assert_eq!(c.get("/datasets").await.body.as_array().unwrap().len(), 1);
    let r = c.send("POST", "/sessions", Some("{}".into()), &key).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.body["key"], "idempotency.key_reused");
    let fresh = c.send("POST", "/datasets", Some(body), &[("Idempotency-Key", "abc-2")]).await;
    assert_eq!(fresh.status, StatusCode::CREATED);
    assert_ne!(fresh.body["id"], a.body["id"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn second_job_on_a_busy_subject_conflicts_and_cancel_works() {
    let c = Client::new();
    let d = dataset(&c, 60).await;
    let body = json!({"dataset_id": d["id"], "hyperparams": {"epochs": 100000, "hidden_layers": [16]}});
    let first = c.post("/models", body.clone()).await;
    assert_eq!(first.status, StatusCode::ACCEPTED);
    let second = c.post("/models", body).await;
    assert_eq!(second.status, StatusCode::CONFLICT, "{}", second.body);
    assert_eq!(second.body["key"], "job.subject_busy");
    let id = first.body["id"].as_str().unwrap();
    let r = c.post(&format!("/jobs/{id}/cancel"), json!({})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.body);
    let job = c.wait_job(id).await;
    assert_eq!(job["state"], "cancelled");
    let r = c.get(&format!("/models/{}", job["result_id"].as_str().unwrap())).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = c.post(&format!("/jobs/{id}/cancel"), json!({})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn session_steps_follow_the_workflow() {
    let c = Client::new();
    let r = c.send("POST", "/sessions", None, &[]).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_schema("session", &r.body);
    assert_eq!(r.body["current_step"], "dataset");
    let sid = r.body["id"].as_str().unwrap().to_string();
    let step = |s: &str| format!("/sessions/{s}/step");

    let r = c.post(&step(&sid), json!({"step": "optimization"})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.body["key"], "session.illegal_transition");
    let r = c.post(&step(&sid), json!({"step": "training"})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.body["key"], "session.step_incomplete");

    let d = dataset(&c, 60).await;
    let r = c.post(&step(&sid), json!({"step": "training", "dataset_id": d["id"]})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.body["current_step"], "training");
    let r = c.post(&step(&sid), json!({"step": "dataset"})).await;
    assert_eq!(r.body["current_step"], "dataset");
    assert_eq!(r.body["dataset_id"], d["id"]);

    let r = c.post("/sessions", json!({"target_skills": ["welding"]})).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = c.get("/sessions").await;
    assert_schema("session_list", &r.body);
    assert_eq!(r.body.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn schemas_are_published() {
    let c = Client::new();
    let r = c.get("/schemas").await;
    let names: Vec<&String> = r.body.as_object().unwrap().keys().collect();
    for n in ["error", "dataset", "model", "job", "optimization", "capabilities", "demo_report"] {
        assert!(names.iter().any(|k| *k == n), "{n}");
    }
    let r = c.get("/schemas/job").await;
    assert_eq!(r.status, StatusCode::OK);
    jsonschema::validator_for(&r.body).unwrap();
    assert_eq!(c.get("/health").await.body["status"], "ok");
}
