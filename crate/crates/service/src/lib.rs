//! Session-oriented HTTP API over the weighting workflow.
//!
//! Every route lives under `/v1`. Request and response bodies are JSON
//! except CSV uploads (multipart or a raw `text/csv` body), the HTML report
//! and the data export.

pub mod error;
pub mod session;

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;
use wbal_core::data::{
    load_csv, summarize, summarize_design, write_csv, AnalysisSpec, Dataset, ParseOptions, Quote, Separator,
    SummaryTable,
};
use wbal_core::example::{generate_example_dataset, DEFAULT_PER_GROUP, DEFAULT_SEED};
use wbal_core::outcome::export_data_and_weights;
use wbal_core::overlap::{group_densities, overlap_flags, DensityCurve, OverlapFlag, TrimRule};
use wbal_core::pipeline::{all_algorithms, compute_all_weights, AlgorithmChoice, EngineFailure};
use wbal_core::report::render_report;
use wbal_core::sensitivity::{sensitivity_grid, RunControl, SensitivityConfig};
use wbal_core::weights::{Algorithm, EngineConfig};

use crate::error::ApiError;
use crate::session::{Session, SessionStatus, Stage};

pub const DEFAULT_UPLOAD_CAP_MB: usize = 50;
const DEFAULT_HEAD_ROWS: usize = 10;
const DEFAULT_DENSITY_GRID: usize = 512;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub upload_cap_bytes: usize,
    /// Directory for session archives written by `POST .../snapshot`.
    pub snapshot_dir: Option<std::path::PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            upload_cap_bytes: DEFAULT_UPLOAD_CAP_MB * 1024 * 1024,
            snapshot_dir: None,
        }
    }
}

type SessionHandle = Arc<RwLock<Session>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, SessionHandle>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState {
            sessions: Arc::default(),
            config: Arc::new(config),
        }
    }

    async fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session `{id}`")))
    }

    async fn insert(&self, session: Session) -> String {
        let id = session.id.clone();
        self.sessions.write().await.insert(id.clone(), Arc::new(RwLock::new(session)));
        id
    }
}

pub fn router(state: AppState) -> Router {
    let cap = state.config.upload_cap_bytes;
    let api = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/import", post(import_session))
        .route("/sessions/{id}", get(session_status).delete(delete_session))
        .route("/sessions/{id}/data", post(upload_data))
        .route("/sessions/{id}/data/example", post(example_data))
        .route("/sessions/{id}/spec", put(set_spec))
        .route("/sessions/{id}/overlap", get(overlap))
        .route("/sessions/{id}/trims", put(set_trims))
        .route("/sessions/{id}/weights", post(compute_weights))
        .route("/sessions/{id}/balance", get(balance))
        .route("/sessions/{id}/estimate", post(estimate))
        .route(
            "/sessions/{id}/sensitivity",
            post(start_sensitivity).get(sensitivity_status).delete(cancel_sensitivity),
        )
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/archive", get(archive))
        .route("/sessions/{id}/snapshot", post(snapshot))
        .layer(DefaultBodyLimit::max(cap))
        .with_state(state);
    Router::new().nest("/v1", api)
}

/// Parses a JSON body, reporting the path of the offending field. An empty
/// body yields the default value.
fn parse_json<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_json_required(body)
}

fn parse_json_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::field(field, e.into_inner().to_string())
    })
}

async fn create_session(State(state): State<AppState>) -> impl IntoResponse {
    let id = state.insert(Session::new(uuid::Uuid::new_v4().to_string())).await;
    (StatusCode::CREATED, Json(serde_json::json!({ "id": id, "stage": Stage::Empty })))
}

async fn session_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionStatus>, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    Ok(Json(s.status()))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let removed = state.sessions.write().await.remove(&id);
    let handle = removed.ok_or_else(|| ApiError::NotFound(format!("unknown session `{id}`")))?;
    if let Some(job) = &handle.read().await.job {
        job.shared.cancel.store(true, std::sync::atomic::Ordering::Relaxed);
    }
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct UploadQuery {
    header: Option<bool>,
    separator: Option<Separator>,
    quote: Option<Quote>,
    rows: Option<usize>,
}

impl UploadQuery {
    fn options(&self, base: ParseOptions) -> ParseOptions {
        ParseOptions {
            header: self.header.unwrap_or(base.header),
            separator: self.separator.unwrap_or(base.separator),
            quote: self.quote.unwrap_or(base.quote),
        }
    }
}

#[derive(Serialize)]
struct DataResponse {
    stage: Stage,
    n_rows: usize,
    columns: Vec<String>,
    summary: Vec<SummaryTable>,
    head: Vec<Vec<Option<String>>>,
}

fn data_response(data: &Dataset, rows: usize) -> Result<DataResponse, ApiError> {
    Ok(DataResponse {
        stage: Stage::DataLoaded,
        n_rows: data.n_rows(),
        columns: data.column_names().into_iter().map(String::from).collect(),
        summary: summarize(data, None)?,
        head: data.head(rows),
    })
}

fn too_large(e: impl std::fmt::Display) -> ApiError {
    ApiError::TooLarge(format!("upload rejected: {e}"))
}

/// Accepts either `multipart/form-data` (a `file` part plus optional
/// `options` JSON or `header`/`separator`/`quote` parts) or the raw CSV as
/// the body, with parse options in the query string.
async fn upload_data(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<UploadQuery>,
    req: Request,
) -> Result<Json<DataResponse>, ApiError> {
    let handle = state.session(&id).await?;
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (bytes, options) = if is_multipart {
        let mut mp = Multipart::from_request(req, &state)
            .await
            .map_err(|e| ApiError::BadRequest(e.body_text()))?;
        let mut file = None;
        let mut options = query.options(ParseOptions::default());
        while let Some(field) = mp.next_field().await.map_err(too_large)? {
            let name = field.name().unwrap_or_default().to_string();
            let value = field.bytes().await.map_err(too_large)?;
            let text = || String::from_utf8_lossy(&value).trim().to_string();
            match name.as_str() {
                "file" => file = Some(value.clone()),
                "options" => options = parse_json_required(&value)?,
                "header" => {
                    options.header = text()
                        .parse()
                        .map_err(|_| ApiError::field("header", "expected true or false"))?
                }
                "separator" => {
                    options.separator = serde_json::from_value(serde_json::Value::String(text()))
                        .map_err(|_| ApiError::field("separator", "expected comma, semicolon or tab"))?
                }
                "quote" => {
                    options.quote = serde_json::from_value(serde_json::Value::String(text()))
                        .map_err(|_| ApiError::field("quote", "expected none, double or single"))?
                }
                _ => {}
            }
        }
        (file.ok_or_else(|| ApiError::field("file", "missing file part"))?, options)
    } else {
        let body = Bytes::from_request(req, &state).await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                too_large(e.body_text())
            } else {
                ApiError::BadRequest(e.body_text())
            }
        })?;
        (body, query.options(ParseOptions::default()))
    };
    let data = tokio::task::spawn_blocking(move || load_csv(&bytes, &options))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let response = data_response(&data, query.rows.unwrap_or(DEFAULT_HEAD_ROWS))?;
    let mut s = handle.write().await;
    s.load_data(data);
    s.touch();
    Ok(Json(response))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ExampleRequest {
    seed: Option<u64>,
    n_per_group: Option<usize>,
    rows: Option<usize>,
}

async fn example_data(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<DataResponse>, ApiError> {
    let handle = state.session(&id).await?;
    let req: ExampleRequest = parse_json(&body)?;
    let seed = req.seed.unwrap_or(DEFAULT_SEED);
    let n = req.n_per_group.unwrap_or(DEFAULT_PER_GROUP);
    let data = tokio::task::spawn_blocking(move || generate_example_dataset(seed, n))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let response = data_response(&data, req.rows.unwrap_or(DEFAULT_HEAD_ROWS))?;
    let mut s = handle.write().await;
    s.load_data(data);
    s.touch();
    Ok(Json(response))
}

#[derive(Serialize)]
struct SpecResponse {
    stage: Stage,
    treatment_formula: String,
    outcome_formula: String,
    n_analysed: usize,
    removed_missing: usize,
}

async fn set_spec(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SpecResponse>, ApiError> {
    let handle = state.session(&id).await?;
    let mut s = handle.write().await;
    s.require(Stage::DataLoaded)?;
    let spec: AnalysisSpec = parse_json_required(&body)?;
    let (treatment_formula, outcome_formula) = s.set_spec(spec)?;
    s.touch();
    let design = s.design()?;
    Ok(Json(SpecResponse {
        stage: s.stage,
        treatment_formula,
        outcome_formula,
        n_analysed: design.n(),
        removed_missing: design.dropped_count(),
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct OverlapQuery {
    grid_size: Option<usize>,
}

#[derive(Serialize)]
struct OverlapResponse {
    stage: Stage,
    n_analysed: usize,
    removed_by_trim: usize,
    trims: Vec<TrimRule>,
    summaries: Vec<SummaryTable>,
    densities: Vec<DensityCurve>,
    flags: Vec<OverlapFlag>,
}

fn overlap_response(s: &Session, grid_size: usize) -> Result<OverlapResponse, ApiError> {
    let design = s.design()?;
    Ok(OverlapResponse {
        stage: s.stage,
        n_analysed: design.n(),
        removed_by_trim: s.removed_by_trim.len(),
        trims: s.trims.clone(),
        summaries: summarize_design(design),
        densities: group_densities(design, grid_size),
        flags: overlap_flags(design),
    })
}

async fn overlap(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<OverlapQuery>,
) -> Result<Json<OverlapResponse>, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    Ok(Json(overlap_response(&s, q.grid_size.unwrap_or(DEFAULT_DENSITY_GRID))?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TrimsRequest {
    rules: Vec<TrimRule>,
}

async fn set_trims(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<OverlapQuery>,
    body: Bytes,
) -> Result<Json<OverlapResponse>, ApiError> {
    let handle = state.session(&id).await?;
    let mut s = handle.write().await;
    s.require(Stage::SpecSet)?;
    let req: TrimsRequest = parse_json(&body)?;
    s.set_trims(req.rules)?;
    s.touch();
    Ok(Json(overlap_response(&s, q.grid_size.unwrap_or(DEFAULT_DENSITY_GRID))?))
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct WeightsRequest {
    algorithms: Vec<Algorithm>,
    engine: EngineConfig,
}

impl Default for WeightsRequest {
    fn default() -> Self {
        WeightsRequest {
            algorithms: all_algorithms(),
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct WeightsResponse {
    stage: Stage,
    computed: Vec<Algorithm>,
    failures: Vec<EngineFailure>,
    recommended: Option<Algorithm>,
    rationale: String,
}

async fn compute_weights(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<WeightsResponse>, ApiError> {
    let handle = state.session(&id).await?;
    // Held for the whole computation: mutations within a session are
    // serialized.
    let mut s = handle.write().await;
    s.require(Stage::SpecSet)?;
    let req: WeightsRequest = parse_json(&body)?;
    if req.algorithms.is_empty() {
        return Err(ApiError::field("algorithms", "select at least one algorithm"));
    }
    req.engine.gbm.validate().map_err(ApiError::from)?;
    let design = s.design()?.clone();
    let generation = s.generation;
    let engine = req.engine.clone();
    let algorithms = req.algorithms;
    let weighting = tokio::task::spawn_blocking(move || compute_all_weights(&design, &algorithms, &engine))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let computed = weighting.weight_sets.iter().map(|w| w.algorithm).collect();
    let failures = weighting.failures.clone();
    let balance = s.store_weights(generation, req.engine, weighting)?;
    let response = WeightsResponse {
        stage: Stage::Weighted,
        computed,
        failures,
        recommended: balance.recommended,
        rationale: balance.rationale.clone(),
    };
    s.touch();
    Ok(Json(response))
}

async fn balance(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    s.require(Stage::Weighted)?;
    Ok(Json(s.balance.as_ref().expect("balance present at WEIGHTED")).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct EstimateRequest {
    algorithm: AlgorithmChoice,
}

async fn estimate(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let handle = state.session(&id).await?;
    let mut s = handle.write().await;
    s.require(Stage::Weighted)?;
    let req: EstimateRequest = parse_json(&body)?;
    let effect = s.estimate(req.algorithm)?;
    let response = Json(effect).into_response();
    s.touch();
    Ok(response)
}

async fn start_sensitivity(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let handle = state.session(&id).await?;
    let mut s = handle.write().await;
    s.require(Stage::Estimated)?;
    let config: SensitivityConfig = parse_json(&body)?;
    config.grid.validate()?;
    if config.draws == 0 {
        return Err(ApiError::field("draws", "must be at least 1"));
    }
    let total = config.grid.es_points * config.grid.rho_points;
    let job = s.start_job(total)?;
    s.touch();

    let design = s.design()?.clone();
    let chosen = s.chosen.expect("chosen at ESTIMATED");
    let weights = s
        .weighting
        .as_ref()
        .and_then(|w| w.get(chosen))
        .expect("chosen weights present")
        .clone();
    let baseline = s.effect.clone().expect("effect at ESTIMATED");
    let engine = s.engine.clone();
    drop(s);

    let shared = job.shared.clone();
    let job_id = job.id.clone();
    let task_handle = handle.clone();
    tokio::spawn(async move {
        let result = tokio::task::spawn_blocking(move || {
            let progress = |done: usize, _total: usize| {
                shared.done.store(done, std::sync::atomic::Ordering::Relaxed);
            };
            sensitivity_grid(
                &design,
                &weights,
                &baseline,
                &engine,
                &config,
                RunControl {
                    parallel: true,
                    progress: Some(&progress),
                    cancel: Some(&shared.cancel),
                },
            )
        })
        .await
        .unwrap_or_else(|e| Err(wbal_core::Error::Numeric(format!("sensitivity worker panicked: {e}"))));
        task_handle.write().await.finish_job(&job_id, result);
    });

    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({ "job_id": job.id, "total": total })),
    )
        .into_response())
}

async fn sensitivity_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    s.require(Stage::Estimated)?;
    if let Some(grid) = &s.sensitivity {
        return Ok(Json(serde_json::json!({ "status": "done", "grid": grid })).into_response());
    }
    match &s.job {
        Some(job) => {
            let mut body = serde_json::to_value(job.status()).map_err(|e| ApiError::Internal(e.to_string()))?;
            body["job_id"] = serde_json::Value::String(job.id.clone());
            Ok(Json(body).into_response())
        }
        None => Err(ApiError::NotFound("no sensitivity job for this session".into())),
    }
}

async fn cancel_sensitivity(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id).await?;
    let mut s = handle.write().await;
    s.require(Stage::Estimated)?;
    s.cancel_job()?;
    s.touch();
    Ok(Json(s.status()).into_response())
}

async fn report(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    let html = render_report(&s.report_context()?);
    Ok((
        [
            (header::CONTENT_TYPE, "text/html; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "inline; filename=\"report.html\""),
        ],
        html,
    )
        .into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ExportQuery {
    format: Option<String>,
}

async fn export(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let (separator, mime, name) = match q.format.as_deref().unwrap_or("csv") {
        "csv" => (Separator::Comma, "text/csv; charset=utf-8", "data_and_weights.csv"),
        "tsv" => (Separator::Tab, "text/tab-separated-values; charset=utf-8", "data_and_weights.tsv"),
        other => return Err(ApiError::field("format", format!("expected csv or tsv, got `{other}`"))),
    };
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    s.require(Stage::Weighted)?;
    let bytes = export_data_and_weights(
        s.data.as_ref().expect("data"),
        s.design()?,
        &s.weighting.as_ref().expect("weights").weight_sets,
        separator,
    )?;
    Ok((
        [
            (header::CONTENT_TYPE, mime.to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\"")),
        ],
        bytes,
    )
        .into_response())
}

/// Everything needed to rebuild a session by replaying its steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionArchive {
    pub data_csv: String,
    pub spec: Option<AnalysisSpec>,
    #[serde(default)]
    pub trims: Vec<TrimRule>,
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub chosen: Option<Algorithm>,
}

fn build_archive(s: &Session) -> Result<SessionArchive, ApiError> {
    s.require(Stage::DataLoaded)?;
    Ok(SessionArchive {
        data_csv: String::from_utf8(write_csv(s.data.as_ref().expect("data"), Separator::Comma))
            .map_err(|e| ApiError::Internal(e.to_string()))?,
        spec: s.spec.clone(),
        trims: s.trims.clone(),
        algorithms: s
            .weighting
            .as_ref()
            .map(|w| {
                let mut all: Vec<Algorithm> = w.weight_sets.iter().map(|x| x.algorithm).collect();
                all.extend(w.failures.iter().map(|f| f.algorithm));
                all
            })
            .unwrap_or_default(),
        engine: s.engine.clone(),
        chosen: s.chosen,
    })
}

async fn archive(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionArchive>, ApiError> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    Ok(Json(build_archive(&s)?))
}

async fn snapshot(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let dir = state
        .config
        .snapshot_dir
        .clone()
        .ok_or_else(|| ApiError::NotFound("snapshots are disabled; set WBAL_SNAPSHOT_DIR".into()))?;
    let handle = state.session(&id).await?;
    let archive = build_archive(&*handle.read().await)?;
    let path = dir.join(format!("{id}.json"));
    let bytes = serde_json::to_vec(&archive).map_err(|e| ApiError::Internal(e.to_string()))?;
    tokio::fs::write(&path, bytes)
        .await
        .map_err(|e| ApiError::Internal(format!("writing {}: {e}", path.display())))?;
    Ok(Json(serde_json::json!({ "path": path })).into_response())
}

/// Restores an archive into a fresh session, replaying every recorded step.
async fn import_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let archive: SessionArchive = parse_json_required(&body)?;
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        let mut s = Session::new(uuid::Uuid::new_v4().to_string());
        s.load_data(load_csv(archive.data_csv.as_bytes(), &ParseOptions::default())?);
        let Some(spec) = archive.spec else { return Ok(s) };
        s.set_spec(spec)?;
        if !archive.trims.is_empty() {
            s.set_trims(archive.trims)?;
        }
        if archive.algorithms.is_empty() {
            return Ok(s);
        }
        let weighting = compute_all_weights(s.design()?, &archive.algorithms, &archive.engine);
        let generation = s.generation;
        s.store_weights(generation, archive.engine, weighting)?;
        if let Some(chosen) = archive.chosen {
            s.estimate(AlgorithmChoice::Fixed(chosen))?;
        }
        Ok(s)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let status = session.status();
    state.insert(session).await;
    Ok((StatusCode::CREATED, Json(status)).into_response())
}
