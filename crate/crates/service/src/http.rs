//! HTTP binding of the workflow operations.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use shadowopt_core::model::ProgramTemplate;

use crate::app::App;
use crate::capabilities::descriptor;
use crate::dto::*;
use crate::error::{ApiError, ApiResult};
use crate::schemas;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
/// Largest accepted request body; bulk ingest bodies are large.
pub const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;
pub const INBOX_POLL: Duration = Duration::from_secs(1);

type Shared = State<Arc<App>>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("documents serialize infallibly")
}

fn reply(status: u16, body: Value) -> Response {
    (StatusCode::from_u16(status).unwrap_or(StatusCode::OK), Json(body)).into_response()
}

fn ok<T: Serialize>(v: &T) -> Response {
    reply(200, to_value(v))
}

/// Runs a store- or compute-bound operation off the async executor.
async fn blocking<T: Send + 'static>(app: &Arc<App>, f: impl FnOnce(&Arc<App>) -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    let app = app.clone();
    tokio::task::spawn_blocking(move || f(&app))
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

fn body_text(body: &Bytes) -> ApiResult<&str> {
    std::str::from_utf8(body).map_err(|_| ApiError::validation("request.malformed", "body is not UTF-8", None))
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    parse_strict_str(body_text(body)?)
}

/// Wraps a create operation with `Idempotency-Key` replay.
async fn create<T, F>(app: &Arc<App>, headers: &HeaderMap, scope: String, status: u16, f: F) -> ApiResult<Response>
where
    T: Serialize,
    F: FnOnce(&Arc<App>) -> ApiResult<T> + Send + 'static,
{
    let key = headers.get(IDEMPOTENCY_HEADER).map(|v| {
        v.to_str()
            .map(str::to_string)
            .map_err(|_| ApiError::validation("request.header_invalid", "Idempotency-Key is not visible ASCII", None))
    });
    let key = key.transpose()?;
    let (status, body) = blocking(app, move |app| {
        app.idempotent(key.as_deref(), &scope, || f(app).map(|v| (status, to_value(&v))))
    })
    .await?;
    Ok(reply(status, body))
}

async fn health() -> Response {
    ok(&serde_json::json!({"status": "ok"}))
}

async fn list_programs(State(app): Shared) -> ApiResult<Response> {
    Ok(ok(&app.programs()?))
}

async fn create_program(State(app): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let template: ProgramTemplate = parse(&body)?;
    create(&app, &headers, "POST /programs".into(), 201, move |app| app.create_program(template)).await
}

async fn get_program(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&app.program(&id)?))
}

async fn ingest(State(app): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let text = body_text(&body)?.to_string();
    create(&app, &headers, "POST /executions".into(), 201, move |app| app.ingest_text(&text)).await
}

fn execution_query(params: HashMap<String, String>) -> ApiResult<ExecutionQuery> {
    let mut q = ExecutionQuery::default();
    let bad = |name: &str, msg: String| ApiError::validation("request.query_invalid", msg, Some(name.to_string()));
    let time = |name: &str, v: &str| {
        chrono::DateTime::parse_from_rfc3339(v)
            .map(|t| t.to_utc())
            .map_err(|e| bad(name, format!("`{v}` is not an RFC 3339 timestamp: {e}")))
    };
    for (k, v) in params {
        match k.as_str() {
            "program_id" => q.program_id = Some(v),
            "time_from" => q.filter.time_from = Some(time(&k, &v)?),
            "time_to" => q.filter.time_to = Some(time(&k, &v)?),
            "offset" => q.offset = v.parse().map_err(|_| bad(&k, format!("`{v}` is not a count")))?,
            "limit" => q.limit = Some(v.parse().map_err(|_| bad(&k, format!("`{v}` is not a count")))?),
            _ => match k.strip_prefix("tag.") {
                Some(tag) if !tag.is_empty() => {
                    q.filter.tag_equals.insert(tag.to_string(), v);
                }
                _ => return Err(bad(&k, format!("unknown query parameter `{k}`"))),
            },
        }
    }
    Ok(q)
}

async fn list_executions(State(app): Shared, Query(params): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let q = execution_query(params)?;
    Ok(ok(&blocking(&app, move |app| app.executions(&q)).await?))
}

async fn create_dataset(State(app): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: CreateDataset = parse(&body)?;
    create(&app, &headers, "POST /datasets".into(), 201, move |app| app.create_dataset(req)).await
}

async fn list_datasets(State(app): Shared) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, |app| app.datasets()).await?))
}

async fn get_dataset(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, move |app| app.dataset(&id)).await?))
}

async fn dataset_quality(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, move |app| app.quality(&id)).await?))
}

async fn dataset_summary(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, move |app| app.summary(&id)).await?))
}

async fn base_models(State(app): Shared, Query(params): Query<HashMap<String, String>>) -> ApiResult<Response> {
    if let Some(k) = params.keys().find(|k| *k != "skill_signature") {
        return Err(ApiError::validation("request.query_invalid", format!("unknown query parameter `{k}`"), Some(k.clone())));
    }
    let sig = params.get("skill_signature").cloned();
    Ok(ok(&blocking(&app, move |app| app.base_models(sig.as_deref())).await?))
}

async fn create_model(State(app): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: TrainRequest = parse(&body)?;
    create(&app, &headers, "POST /models".into(), 202, move |app| app.submit_training(req)).await
}

async fn list_models(State(app): Shared) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, |app| app.models()).await?))
}

async fn get_model(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let doc = blocking(&app, move |app| app.model(&id)).await?;
    Ok(ok(doc.as_ref()))
}

async fn model_diagnostics(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, move |app| app.diagnostics(&id)).await?))
}

async fn model_lrp(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: LrpRequest = if body_text(&body)?.trim().is_empty() { LrpRequest::default() } else { parse(&body)? };
    Ok(ok(&blocking(&app, move |app| app.lrp(&id, req)).await?))
}

async fn model_predict(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: PredictRequest = parse(&body)?;
    Ok(ok(&blocking(&app, move |app| app.predict(&id, req)).await?))
}

async fn create_optimization(State(app): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: OptimizeRequest = parse(&body)?;
    create(&app, &headers, "POST /optimizations".into(), 202, move |app| app.submit_optimization(req)).await
}

async fn get_optimization(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, move |app| app.optimization(&id)).await?))
}

async fn whatif(State(app): Shared, body: Bytes) -> ApiResult<Response> {
    let req: WhatIfRequest = parse(&body)?;
    Ok(ok(&blocking(&app, move |app| app.what_if(req)).await?))
}

async fn list_jobs(State(app): Shared) -> Response {
    ok(&app.jobs())
}

async fn get_job(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&app.job(&id)?))
}

async fn cancel_job(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(reply(202, to_value(&app.cancel_job(&id)?)))
}

async fn capabilities() -> Response {
    ok(&descriptor())
}

async fn list_schemas() -> Response {
    ok(&schemas::all())
}

async fn get_schema(Path(name): Path<String>) -> ApiResult<Response> {
    let all = schemas::all();
    let schema = all.get(name.as_str()).ok_or_else(|| ApiError::not_found("schema", &name))?;
    Ok(ok(schema))
}

async fn list_sessions(State(app): Shared) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, |app| app.sessions()).await?))
}

async fn create_session(State(app): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = if body_text(&body)?.trim().is_empty() {
        parse_strict(serde_json::json!({}))?
    } else {
        parse(&body)?
    };
    create(&app, &headers, "POST /sessions".into(), 201, move |app| app.create_session(req)).await
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ok(&blocking(&app, move |app| app.session(&id)).await?))
}

async fn step_session(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: StepRequest = parse(&body)?;
    Ok(ok(&blocking(&app, move |app| app.step_session(&id, req)).await?))
}

/// Replaces the framework's plain-text body rejections with the error envelope.
async fn envelope_rejections(resp: Response) -> Response {
    let json = resp
        .headers()
        .get(axum::http::header::CONTENT_TYPE)
        .is_some_and(|v| v.as_bytes().starts_with(b"application/json"));
    match resp.status() {
        StatusCode::PAYLOAD_TOO_LARGE if !json => ApiError::too_large(MAX_BODY_BYTES).into_response(),
        StatusCode::BAD_REQUEST if !json => {
            ApiError::validation("request.malformed", "request body could not be read", None).into_response()
        }
        _ => resp,
    }
}

async fn not_found() -> ApiError {
    ApiError::not_found("route", "requested path")
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/programs", get(list_programs).post(create_program))
        .route("/programs/{id}", get(get_program))
        .route("/executions", get(list_executions).post(ingest))
        .route("/datasets", get(list_datasets).post(create_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/quality", get(dataset_quality))
        .route("/datasets/{id}/summary", get(dataset_summary))
        .route("/models", get(list_models).post(create_model))
        .route("/models/base", get(base_models))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/diagnostics", get(model_diagnostics))
        .route("/models/{id}/lrp", post(model_lrp))
        .route("/models/{id}/predict", post(model_predict))
        .route("/optimizations", post(create_optimization))
        .route("/optimizations/{id}", get(get_optimization))
        .route("/whatif", post(whatif))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/capabilities", get(capabilities))
        .route("/schemas", get(list_schemas))
        .route("/schemas/{name}", get(get_schema))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step_session))
        .fallback(not_found)
        .layer(axum::middleware::map_response(envelope_rejections))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(app)
}

/// Polls the inbox directory until the process stops.
pub async fn watch_inbox(app: Arc<App>) {
    let mut tick = tokio::time::interval(INBOX_POLL);
    loop {
        tick.tick().await;
        match blocking(&app, |app| app.scan_inbox()).await {
            Ok(outcomes) => {
                for o in outcomes {
                    match o.result {
                        Ok(r) => tracing::info!("inbox {}: ingested {} executions", o.file, r.ingested),
                        Err(e) => tracing::warn!("inbox {}: rejected: {}", o.file, e.message),
                    }
                }
            }
            Err(e) => tracing::warn!("inbox scan failed: {e}"),
        }
    }
}

/// Serves until Ctrl-C. `on_bound` receives the bound address, which
/// differs from `addr` when port 0 was requested.
pub async fn serve(app: Arc<App>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    let watcher = tokio::spawn(watch_inbox(app.clone()));
    let result = axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    watcher.abort();
    result
}
