//! HTTP service under `/api/v1`.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower::limit::GlobalConcurrencyLimitLayer;

use perfbaron_core::canary::{NewMute, PolicyConfig};
use perfbaron_core::changepoint::{self, CpdParams, TriageState};
use perfbaron_core::compare::{self, DEFAULT_MIN_DEVIATION};
use perfbaron_core::error::{Error, ErrorKind};
use perfbaron_core::ingest::PreAggregatedRecord;
use perfbaron_core::model::{MetricKey, RawEvent, Resolution, RootCause, RunId, TestRun, THROUGHPUT};
use perfbaron_core::triage::{ActionKind, ActionPayload, Targets, TimeRange, TransitionRequest, TriageFilter};
use perfbaron_core::{KeyFilter, Store};

use crate::parse_time;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Maximum number of requests handled at once.
    pub concurrency: usize,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub token: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { concurrency: 64, token: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ApiErrorCode {
    NotFound,
    Conflict,
    Validation,
    IllegalTransition,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ApiErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
    #[serde(skip)]
    status: Option<u16>,
}

impl ApiError {
    pub fn validation(message: impl Into<String>) -> Self {
        ApiError { code: ApiErrorCode::Validation, message: message.into(), detail: Value::Null, status: None }
    }

    fn status(&self) -> StatusCode {
        if let Some(s) = self.status.and_then(|s| StatusCode::from_u16(s).ok()) {
            return s;
        }
        match self.code {
            ApiErrorCode::NotFound => StatusCode::NOT_FOUND,
            ApiErrorCode::Conflict | ApiErrorCode::IllegalTransition => StatusCode::CONFLICT,
            ApiErrorCode::Validation => StatusCode::BAD_REQUEST,
            ApiErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::NotFound => ApiErrorCode::NotFound,
            ErrorKind::Conflict => ApiErrorCode::Conflict,
            ErrorKind::Validation => ApiErrorCode::Validation,
            ErrorKind::IllegalTransition => ApiErrorCode::IllegalTransition,
            ErrorKind::Internal => ApiErrorCode::Internal,
        };
        let detail = match &e {
            Error::InvalidRegex { offset, .. } => json!({ "offset": offset }),
            Error::IllegalTransition { id, current, action } => {
                json!({ "id": id, "current": current, "action": action })
            }
            Error::VersionConflict { id, expected, found } => {
                json!({ "id": id, "expected": expected, "found": found })
            }
            Error::CannotRecompute(keys) => json!({ "keys": keys }),
            _ => Value::Null,
        };
        ApiError { code, message: e.to_string(), detail, status: None }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::validation(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::validation(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose rejections are reported as `VALIDATION` errors.
struct Body<T>(T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let Json(v) = Json::<T>::from_request(req, state).await?;
        Ok(Body(v))
    }
}

/// Optional JSON body: an empty request body yields the default.
struct OptBody<T>(T);

impl<T: DeserializeOwned + Default, S: Send + Sync> FromRequest<S> for OptBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes =
            axum::body::Bytes::from_request(req, state).await.map_err(|e| ApiError::validation(e.body_text()))?;
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Ok(OptBody(T::default()));
        }
        serde_json::from_slice(&bytes).map(OptBody).map_err(|e| ApiError::validation(e.to_string()))
    }
}

type Shared = State<Arc<Store>>;

/// Runs store work off the async executor.
async fn blocking<T: Send + 'static>(
    store: Arc<Store>,
    f: impl FnOnce(&Store) -> perfbaron_core::Result<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::from(Error::Internal(e.to_string())))?
        .map_err(ApiError::from)
}

pub fn router(store: Arc<Store>, config: &ServeConfig) -> Router {
    let api = Router::new()
        .route("/runs", post(register_run))
        .route("/results/raw", post(ingest_raw))
        .route("/results", post(ingest_preaggregated))
        .route("/statistics/recompute", post(recompute))
        .route("/series/{*key}", get(series))
        .route("/trend/{*key}", get(trend))
        .route("/detect", post(detect))
        .route("/changepoints", get(list_change_points))
        .route("/changepoints:transition", patch(transition))
        .route("/tickets", post(create_ticket).get(list_tickets))
        .route("/tickets/{id}", patch(label_ticket).get(get_ticket))
        .route("/compare", get(compare_revisions))
        .route("/mutes", post(create_mute).get(list_mutes))
        .route("/mutes/{id}", delete(expire_mute))
        .route("/canary/evaluate", post(evaluate_canaries))
        .route("/canary/decisions", get(canary_decisions))
        .route("/canary/reschedules", get(reschedules))
        .route("/canary/policy", get(get_policy).put(put_policy))
        .route("/canary/patterns", get(get_patterns).put(put_patterns))
        .route("/reports/summary", get(summary_report));
    let mut app = Router::new().nest("/api/v1", api).with_state(store);
    if let Some(token) = config.token.clone() {
        let expected: Arc<str> = Arc::from(format!("Bearer {token}"));
        app = app.layer(middleware::from_fn(move |req: Request, next: Next| {
            let expected = expected.clone();
            async move { check_token(&expected, req, next).await }
        }));
    }
    app.layer(GlobalConcurrencyLimitLayer::new(config.concurrency.max(1)))
}

async fn check_token(expected: &str, req: Request, next: Next) -> Response {
    let ok = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).is_some_and(|v| v == expected);
    if ok {
        next.run(req).await
    } else {
        ApiError {
            code: ApiErrorCode::Validation,
            message: "missing or invalid bearer token".into(),
            detail: Value::Null,
            status: Some(401),
        }
        .into_response()
    }
}

async fn register_run(State(store): Shared, Body(run): Body<TestRun>) -> ApiResult<impl IntoResponse> {
    let run = blocking(store, move |s| s.register_run(run)).await?;
    Ok((StatusCode::CREATED, Json(run)))
}

#[derive(Deserialize)]
struct RawRequest {
    #[serde(default)]
    run: Option<TestRun>,
    #[serde(default)]
    run_id: Option<RunId>,
    events: Vec<RawEvent>,
}

fn batch_run_id(run: &Option<TestRun>, run_id: Option<RunId>) -> ApiResult<RunId> {
    match (run, run_id) {
        (Some(r), Some(id)) if r.run_id != id => {
            Err(ApiError::validation(format!("run_id {id} does not match run {}", r.run_id)))
        }
        (_, Some(id)) => Ok(id),
        (Some(r), None) => Ok(r.run_id.clone()),
        (None, None) => Err(ApiError::validation("run_id or run is required")),
    }
}

async fn ingest_raw(State(store): Shared, Body(req): Body<RawRequest>) -> ApiResult<impl IntoResponse> {
    let run_id = batch_run_id(&req.run, req.run_id)?;
    let values = blocking(store, move |s| {
        if let Some(run) = req.run {
            s.register_run(run)?;
        }
        s.ingest_raw(&run_id, req.events)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "measurements": values }))))
}

#[derive(Deserialize)]
struct PreAggregatedRequest {
    #[serde(default)]
    run: Option<TestRun>,
    values: Vec<PreAggregatedRecord>,
}

async fn ingest_preaggregated(
    State(store): Shared,
    Body(req): Body<PreAggregatedRequest>,
) -> ApiResult<impl IntoResponse> {
    let mut by_run: BTreeMap<RunId, Vec<(MetricKey, f64)>> = BTreeMap::new();
    for v in &req.values {
        by_run.entry(v.run_id.clone()).or_default().push((v.key()?, v.value));
    }
    let values = blocking(store, move |s| {
        if let Some(run) = req.run {
            s.register_run(run)?;
        }
        let mut out = Vec::new();
        for (run_id, vals) in by_run {
            out.extend(s.ingest_preaggregated(&run_id, vals)?);
        }
        Ok(out)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "measurements": values }))))
}

#[derive(Deserialize)]
struct RecomputeRequest {
    #[serde(default)]
    filter: KeyFilter,
    percentile: f64,
}

async fn recompute(State(store): Shared, Body(req): Body<RecomputeRequest>) -> ApiResult<impl IntoResponse> {
    let out = blocking(store, move |s| s.recompute_statistics(&req.filter, req.percentile)).await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct SeriesQuery {
    #[serde(default)]
    include_suppressed: bool,
}

async fn series(
    State(store): Shared,
    Path(key): Path<String>,
    query: Result<Query<SeriesQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    let key: MetricKey = key.parse()?;
    let state = store.read();
    let series = state.series(&key, q.include_suppressed)?;
    let change_points = state.change_points(&key).to_vec();
    let regions = changepoint::stable_regions(&state.series(&key, false)?, &change_points)?;
    Ok(Json(json!({ "series": series, "change_points": change_points, "regions": regions })))
}

#[derive(Deserialize)]
struct TrendQuery {
    measurement: Option<String>,
}

/// `key` names a test (`project/configuration/task/test`); the measurement
/// comes from the query and defaults to throughput, or the first recorded
/// measurement.
async fn trend(
    State(store): Shared,
    Path(key): Path<String>,
    query: Result<Query<TrendQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    let test_key: MetricKey = match key.split('/').count() {
        4 => format!("{key}/{THROUGHPUT}").parse()?,
        _ => key.parse()?,
    };
    let state = store.read();
    let available = state.measurements_for_test(&test_key);
    let measurement = match q.measurement {
        Some(m) => m,
        None if available.iter().any(|m| m == THROUGHPUT) => THROUGHPUT.to_string(),
        None => available.first().cloned().ok_or_else(|| Error::NotFound(format!("test {key}")))?,
    };
    let key = test_key.with_measurement(measurement.clone());
    let series = state.series(&key, false)?;
    let change_points = state.change_points(&key).to_vec();
    Ok(Json(json!({
        "measurement": measurement,
        "available_measurements": available,
        "series": series,
        "change_points": change_points,
    })))
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct DetectRequest {
    filter: KeyFilter,
    params: CpdParams,
}

async fn detect(State(store): Shared, OptBody(req): OptBody<DetectRequest>) -> ApiResult<impl IntoResponse> {
    let summary = blocking(store, move |s| s.detect(&req.filter, &req.params)).await?;
    Ok(Json(summary))
}

#[derive(Deserialize)]
struct ChangePointQuery {
    measurement_regex: Option<String>,
    state: Option<String>,
    group: Option<String>,
    #[serde(default)]
    include_canaries: bool,
    date_start: Option<String>,
    date_end: Option<String>,
    calculated_start: Option<String>,
    calculated_end: Option<String>,
}

fn range(start: Option<String>, end: Option<String>) -> ApiResult<TimeRange> {
    let parse = |s: Option<String>| s.filter(|s| !s.is_empty()).map(|s| parse_time(&s)).transpose();
    Ok(TimeRange { start: parse(start)?, end: parse(end)? })
}

async fn list_change_points(
    State(store): Shared,
    query: Result<Query<ChangePointQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let filter = TriageFilter {
        measurement_regex: q.measurement_regex.filter(|s| !s.is_empty()),
        state: q.state.filter(|s| !s.is_empty()).map(|s| s.parse::<TriageState>()).transpose()?,
        date_range: range(q.date_start, q.date_end)?,
        calculated_on_range: range(q.calculated_start, q.calculated_end)?,
        include_canaries: q.include_canaries,
    };
    let groups = store.list_groups(&filter)?;
    match q.group.as_deref() {
        None | Some("") | Some("revision") => Ok(Json(json!({ "groups": groups })).into_response()),
        Some("none") => {
            let flat: Vec<_> = groups.into_iter().flat_map(|g| g.change_points).collect();
            Ok(Json(json!({ "change_points": flat })).into_response())
        }
        Some(other) => Err(ApiError::validation(format!("unknown grouping {other:?}"))),
    }
}

async fn transition(State(store): Shared, Body(req): Body<TransitionRequest>) -> ApiResult<impl IntoResponse> {
    let out = blocking(store, move |s| s.transition(req)).await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct NewTicketRequest {
    actor: String,
    #[serde(default)]
    summary: Option<String>,
    #[serde(default)]
    targets: Targets,
    #[serde(default)]
    expected_versions: BTreeMap<String, u64>,
}

async fn create_ticket(State(store): Shared, Body(req): Body<NewTicketRequest>) -> ApiResult<impl IntoResponse> {
    let request = TransitionRequest {
        actor: req.actor,
        action: ActionKind::CreateTicket,
        targets: req.targets,
        payload: ActionPayload { summary: req.summary, ..ActionPayload::default() },
        expected_versions: req.expected_versions,
    };
    let out = blocking(store, move |s| s.transition(request)).await?;
    Ok((StatusCode::CREATED, Json(out)))
}

async fn list_tickets(State(store): Shared) -> impl IntoResponse {
    let tickets: Vec<_> = store.read().tickets().cloned().collect();
    Json(json!({ "tickets": tickets }))
}

async fn get_ticket(State(store): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let state = store.read();
    let ticket = state.ticket(&id).ok_or_else(|| Error::NotFound(format!("ticket {id}")))?;
    Ok(Json(ticket.clone()))
}

#[derive(Deserialize)]
struct LabelRequest {
    #[serde(default)]
    actor: String,
    root_cause: RootCause,
    #[serde(default)]
    resolution: Option<Resolution>,
}

async fn label_ticket(
    State(store): Shared,
    Path(id): Path<String>,
    Body(req): Body<LabelRequest>,
) -> ApiResult<impl IntoResponse> {
    let ticket = blocking(store, move |s| s.label_ticket(&id, req.root_cause, req.resolution, &req.actor)).await?;
    Ok(Json(ticket))
}

#[derive(Deserialize)]
struct CompareQuery {
    base: String,
    candidate: String,
    min_deviation: Option<f64>,
    format: Option<String>,
    project: Option<String>,
    configuration: Option<String>,
    task: Option<String>,
    test: Option<String>,
    measurement_regex: Option<String>,
}

async fn compare_revisions(
    State(store): Shared,
    query: Result<Query<CompareQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::validation(format!("unknown format {other:?}"))),
    };
    let filter = KeyFilter {
        project: q.project,
        configuration: q.configuration,
        task: q.task,
        test: q.test,
        measurement_regex: q.measurement_regex.filter(|s| !s.is_empty()),
        ..KeyFilter::default()
    };
    let min_deviation = q.min_deviation.unwrap_or(DEFAULT_MIN_DEVIATION);
    let report = blocking(store, move |s| {
        compare::filter_and_sort(s.compare_revisions(&q.base, &q.candidate, &filter)?, min_deviation)
    })
    .await?;
    if csv {
        let mut headers = HeaderMap::new();
        headers.insert(header::CONTENT_TYPE, "text/csv; charset=utf-8".parse().expect("static header"));
        Ok((headers, compare::export_csv(&report)).into_response())
    } else {
        Ok(Json(report).into_response())
    }
}

async fn create_mute(State(store): Shared, Body(req): Body<NewMute>) -> ApiResult<impl IntoResponse> {
    let mute = blocking(store, move |s| s.apply_mute(req)).await?;
    Ok((StatusCode::CREATED, Json(mute)))
}

#[derive(Deserialize)]
struct MuteQuery {
    #[serde(default)]
    include_expired: bool,
}

async fn list_mutes(
    State(store): Shared,
    query: Result<Query<MuteQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    Ok(Json(json!({ "mutes": store.list_mutes(q.include_expired) })))
}

async fn expire_mute(State(store): Shared, Path(id): Path<u64>) -> ApiResult<impl IntoResponse> {
    let mute = blocking(store, move |s| s.expire_mute(id)).await?;
    Ok(Json(mute))
}

#[derive(Deserialize)]
struct EvaluateRequest {
    run_id: RunId,
}

async fn evaluate_canaries(State(store): Shared, Body(req): Body<EvaluateRequest>) -> ApiResult<impl IntoResponse> {
    let out = blocking(store, move |s| s.evaluate_canaries(&req.run_id)).await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct DecisionQuery {
    run_id: Option<RunId>,
}

async fn canary_decisions(
    State(store): Shared,
    query: Result<Query<DecisionQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    Ok(Json(json!({ "decisions": store.canary_decisions(q.run_id.as_ref()) })))
}

async fn reschedules(State(store): Shared) -> impl IntoResponse {
    Json(json!({ "reschedules": store.read().reschedules() }))
}

async fn get_policy(State(store): Shared) -> impl IntoResponse {
    Json(store.read().policy().clone())
}

async fn put_policy(State(store): Shared, Body(config): Body<PolicyConfig>) -> ApiResult<impl IntoResponse> {
    let out = config.clone();
    blocking(store, move |s| s.set_policy(config)).await?;
    Ok(Json(out))
}

#[derive(Deserialize, Serialize)]
struct Patterns {
    patterns: Vec<String>,
}

async fn get_patterns(State(store): Shared) -> impl IntoResponse {
    Json(Patterns { patterns: store.read().canary_patterns().to_vec() })
}

async fn put_patterns(State(store): Shared, Body(req): Body<Patterns>) -> ApiResult<impl IntoResponse> {
    let patterns = req.patterns.clone();
    blocking(store, move |s| s.set_canary_patterns(patterns)).await?;
    Ok(Json(req))
}

#[derive(Deserialize)]
struct SummaryQuery {
    start: String,
    end: String,
}

async fn summary_report(
    State(store): Shared,
    query: Result<Query<SummaryQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    let report = store.summary_report(parse_time(&q.start)?, parse_time(&q.end)?)?;
    Ok(Json(report))
}
