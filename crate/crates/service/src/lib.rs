//! HTTP API over annotation campaigns.
//!
//! Campaigns live in `<data-dir>/<campaign_id>/` and are opened lazily, so a
//! restarted server picks up every campaign from its logs on first access.
//! Writes to one campaign are serialized by a per-campaign lock; the log
//! entry is fsynced before a response is sent.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use claimsect::annotation::{
    valid_campaign_id, Campaign, CampaignError, ClaimProgress, NewCampaign, ReportSet,
    SessionSnapshot,
};
use claimsect::classify::{
    classify, ClassifyError, Comparator, DetectOptions, PredictionRecord, ThresholdSet,
    ZERO_SHOT_THRESHOLD,
};
use claimsect::pba::{BisectionConfig, PosteriorPoint, SessionStatus, ThresholdReport};
use claimsect::scores::{ingest_scores, parse_dataset, peek_score_kind, ScoreMatrix};
use claimsect::taxonomy::{parse_taxonomy, Discrepancy, Taxonomy};
use claimsect::FORMAT_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

/// Environment variable read when `--data-dir` is not given.
pub const DATA_DIR_ENV: &str = "CLAIMSECT_DATA_DIR";

/// Upper bound on posterior points sent to clients.
pub const MAX_POSTERIOR_POINTS: usize = 101;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Static files served for every path no API route matches.
    pub ui_dir: Option<PathBuf>,
}

type Shared = Arc<Mutex<Campaign>>;

#[derive(Clone)]
pub struct AppState {
    data_dir: Arc<PathBuf>,
    campaigns: Arc<Mutex<HashMap<String, Shared>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panic while holding the lock leaves on-disk state authoritative; the
    // in-memory copy is only ever mutated after a durable write.
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(&data_dir)?;
        Ok(AppState {
            data_dir: Arc::new(data_dir),
            campaigns: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn campaign(&self, id: &str) -> Result<Shared, ApiError> {
        if !valid_campaign_id(id) {
            return Err(ApiError::not_found(format!("no campaign {id:?}")));
        }
        let mut open = lock(&self.campaigns);
        if let Some(c) = open.get(id) {
            return Ok(c.clone());
        }
        let campaign = Campaign::open(&self.data_dir.join(id))?;
        let shared = Arc::new(Mutex::new(campaign));
        open.insert(id.to_string(), shared.clone());
        Ok(shared)
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "format": FORMAT_VERSION, "error": code, "message": message.into() }),
        }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message).with("field", json!(field))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<CampaignError> for ApiError {
    fn from(err: CampaignError) -> Self {
        let msg = err.to_string();
        match err {
            CampaignError::NotFound(_) => ApiError::not_found(msg),
            CampaignError::UnknownClaim(claim) => {
                ApiError::not_found(msg).with("claim_id", json!(claim))
            }
            CampaignError::AlreadyExists(_) => {
                ApiError::new(StatusCode::CONFLICT, "already_exists", msg)
            }
            CampaignError::StaleVersion { current, .. } => {
                ApiError::new(StatusCode::CONFLICT, "stale_version", msg)
                    .with("current_version", json!(current))
            }
            CampaignError::NothingToUndo(_) => {
                ApiError::new(StatusCode::CONFLICT, "nothing_to_undo", msg)
            }
            CampaignError::Finished { report, .. } => {
                ApiError::new(StatusCode::GONE, "finished", msg).with("report", json!(report))
            }
            CampaignError::WrongDocument { expected, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "wrong_document", msg)
                    .with("expected_doc_id", json!(expected))
            }
            CampaignError::Discrepancies(list) => {
                let missing: Vec<Value> = list.iter().map(discrepancy_json).collect();
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "discrepancies", msg)
                    .with("discrepancies", Value::Array(missing))
            }
            CampaignError::Invalid(_)
            | CampaignError::Taxonomy(_)
            | CampaignError::Scores(_)
            | CampaignError::Engine(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", msg)
            }
            CampaignError::Io { .. }
            | CampaignError::Corrupt { .. }
            | CampaignError::Annotator(_) => ApiError::internal(msg),
        }
    }
}

fn discrepancy_json(d: &Discrepancy) -> Value {
    serde_json::to_value(d).expect("discrepancy serializes")
}

impl From<ClassifyError> for ApiError {
    fn from(err: ClassifyError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", err.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        ApiError::new(rejection.status(), "bad_request", rejection.body_text())
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

// ---------------------------------------------------------------------------
// Payloads

/// Engine settings a client may override; everything else keeps its default
/// and the range follows the score file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub p: Option<f64>,
    pub grid_size: Option<usize>,
    pub completion_ci_mass: Option<f64>,
    pub completion_ci_width: Option<f64>,
    pub max_annotations: Option<usize>,
    pub stop_on_complete: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, mut config: BisectionConfig) -> BisectionConfig {
        if let Some(p) = self.p {
            config.p = p;
        }
        if let Some(n) = self.grid_size {
            config.grid_size = n;
        }
        if let Some(m) = self.completion_ci_mass {
            config.completion_ci_mass = m;
        }
        if let Some(w) = self.completion_ci_width {
            config.completion_ci_width = w;
        }
        if self.max_annotations.is_some() {
            config.max_annotations = self.max_annotations;
        }
        if let Some(s) = self.stop_on_complete {
            config.stop_on_complete = s;
        }
        config
    }
}

/// `POST /campaigns`. Paths are resolved on the server.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateCampaignRequest {
    pub campaign_id: String,
    pub taxonomy: PathBuf,
    pub scores: PathBuf,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub doc_id: String,
    pub entails: bool,
    pub version: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndoRequest {
    #[serde(default)]
    pub version: Option<u64>,
}

/// `POST /classify`. Either name a campaign (its taxonomy, scores and
/// finished thresholds are used) or give taxonomy and score paths.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    #[serde(default)]
    pub campaign_id: Option<String>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub scores: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub zero_shot: bool,
    #[serde(default)]
    pub negation_filter: bool,
    #[serde(default)]
    pub comparator: Comparator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub format: String,
    #[serde(flatten)]
    pub snapshot: SessionSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ThresholdReport>,
}

fn read(path: &Path, field: &str) -> Result<Vec<u8>, ApiError> {
    std::fs::read(path).map_err(|e| ApiError::invalid(field, format!("{}: {e}", path.display())))
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy, ApiError> {
    parse_taxonomy(&read(path, "taxonomy")?)
        .map_err(|e| ApiError::invalid("taxonomy", e.to_string()))
}

fn load_scores(path: &Path) -> Result<ScoreMatrix, ApiError> {
    let bytes = read(path, "scores")?;
    let kind = peek_score_kind(&bytes).map_err(|e| ApiError::invalid("scores", e.to_string()))?;
    ingest_scores(&bytes, kind).map_err(|e| ApiError::invalid("scores", e.to_string()))
}

fn ok(value: Value) -> Json<Value> {
    Json(value)
}

// ---------------------------------------------------------------------------
// Handlers

async fn healthz() -> Json<Value> {
    ok(json!({ "format": FORMAT_VERSION, "status": "ok" }))
}

async fn list_campaigns(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        let mut ids = Vec::new();
        let entries =
            std::fs::read_dir(state.data_dir()).map_err(|e| ApiError::internal(e.to_string()))?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_campaign_id(&name) && entry.path().join("campaign.json").exists() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ok(json!({ "format": FORMAT_VERSION, "campaigns": ids })))
    })
    .await
}

async fn create_campaign(
    State(state): State<AppState>,
    payload: Result<Json<CreateCampaignRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(req) = payload?;
    blocking(move || {
        if !valid_campaign_id(&req.campaign_id) {
            return Err(ApiError::invalid(
                "campaign_id",
                "must be 1-128 characters of [A-Za-z0-9_-]",
            ));
        }
        let taxonomy = load_taxonomy(&req.taxonomy)?;
        let scores = load_scores(&req.scores)?;
        let documents = match &req.dataset {
            Some(path) => parse_dataset(&read(path, "dataset")?)
                .map_err(|e| ApiError::invalid("dataset", e.to_string()))?,
            None => Vec::new(),
        };
        let config = req
            .config
            .apply(BisectionConfig::default().with_range(scores.range()));
        if let Err(e) = config.validate() {
            return Err(ApiError::invalid("config", e.to_string()));
        }

        // Holding the registry lock makes a concurrent duplicate see 409.
        let mut open = lock(&state.campaigns);
        let dir = state.data_dir().join(&req.campaign_id);
        let campaign = Campaign::create(
            &dir,
            NewCampaign {
                campaign_id: req.campaign_id.clone(),
                taxonomy,
                scores,
                documents,
                config,
            },
        )?;
        let body = json!({
            "format": FORMAT_VERSION,
            "campaign_id": req.campaign_id,
            "claims": campaign.meta().claims,
            "config": campaign.meta().config,
        });
        open.insert(req.campaign_id, Arc::new(Mutex::new(campaign)));
        Ok((StatusCode::CREATED, ok(body)))
    })
    .await
}

async fn get_campaign(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        let shared = state.campaign(&id)?;
        let campaign = lock(&shared);
        let claims = campaign.summaries();
        let mut counts: BTreeMap<&str, usize> = [
            ("pending", 0),
            ("running", 0),
            ("complete", 0),
            ("early_stop", 0),
            ("capped", 0),
        ]
        .into_iter()
        .collect();
        for c in &claims {
            let key = match c.status {
                ClaimProgress::Pending => "pending",
                ClaimProgress::Running => "running",
                ClaimProgress::Complete => "complete",
                ClaimProgress::EarlyStop => "early_stop",
                ClaimProgress::Capped => "capped",
            };
            *counts.get_mut(key).expect("all statuses listed") += 1;
        }
        Ok(ok(json!({
            "format": FORMAT_VERSION,
            "campaign_id": campaign.meta().campaign_id,
            "taxonomy_id": campaign.meta().taxonomy_id,
            "config": campaign.meta().config,
            "counts": counts,
            "claims": claims,
        })))
    })
    .await
}

#[derive(Serialize)]
struct ItemPayload<'a> {
    format: &'static str,
    state: &'static str,
    session_id: String,
    claim_id: &'a str,
    claim_text: &'a str,
    doc_id: &'a str,
    doc_text: Option<&'a str>,
    s_t: f64,
    step: usize,
    version: u64,
    median: f64,
    ci_width: f64,
    target_ci_width: f64,
    annotations_used: usize,
    status: SessionStatus,
    posterior: Vec<PosteriorPoint>,
}

async fn next_item(
    State(state): State<AppState>,
    UrlPath((id, claim_id)): UrlPath<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        let shared = state.campaign(&id)?;
        let campaign = lock(&shared);
        let session = campaign.session(&claim_id)?;
        let Some(doc) = session.current() else {
            return Ok(ok(json!({
                "format": FORMAT_VERSION,
                "state": "done",
                "session_id": format!("{id}/{claim_id}"),
                "claim_id": claim_id,
                "version": session.version(),
                "report": session.report(),
            })));
        };
        let st = session.state();
        let claim = campaign
            .taxonomy()
            .claim(&claim_id)
            .expect("sessions exist only for taxonomy claims");
        let payload = ItemPayload {
            format: FORMAT_VERSION,
            state: "item",
            session_id: format!("{id}/{claim_id}"),
            claim_id: &claim_id,
            claim_text: &claim.text,
            doc_id: &doc.doc_id,
            doc_text: campaign.document(&doc.doc_id).map(|d| d.text.as_str()),
            s_t: doc.score,
            step: session.log().len() + 1,
            version: session.version(),
            median: st.median(),
            ci_width: st.ci_width(),
            target_ci_width: campaign.meta().config.completion_ci_width,
            annotations_used: st.annotations_used(),
            status: st.status(),
            posterior: st.downsample(MAX_POSTERIOR_POINTS),
        };
        Ok(ok(serde_json::to_value(payload).expect("item serializes")))
    })
    .await
}

async fn post_annotation(
    State(state): State<AppState>,
    UrlPath((id, claim_id)): UrlPath<(String, String)>,
    payload: Result<Json<AnnotationRequest>, JsonRejection>,
) -> Result<Json<AnnotationResponse>, ApiError> {
    let Json(req) = payload?;
    blocking(move || {
        let shared = state.campaign(&id)?;
        let mut campaign = lock(&shared);
        let snapshot =
            campaign.record_answer(&claim_id, &req.doc_id, req.entails, Some(req.version))?;
        let report = campaign.session(&claim_id)?.report();
        Ok(Json(AnnotationResponse {
            format: FORMAT_VERSION.to_string(),
            snapshot,
            report,
        }))
    })
    .await
}

async fn undo(
    State(state): State<AppState>,
    UrlPath((id, claim_id)): UrlPath<(String, String)>,
    body: Bytes,
) -> Result<Json<AnnotationResponse>, ApiError> {
    let req: UndoRequest = if body.iter().all(u8::is_ascii_whitespace) {
        UndoRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "bad_request",
                e.to_string(),
            )
        })?
    };
    blocking(move || {
        let shared = state.campaign(&id)?;
        let mut campaign = lock(&shared);
        if let Some(given) = req.version {
            let current = campaign.session(&claim_id)?.version();
            if given != current {
                return Err(CampaignError::StaleVersion { given, current }.into());
            }
        }
        campaign.undo_last(&claim_id)?;
        Ok(Json(AnnotationResponse {
            format: FORMAT_VERSION.to_string(),
            snapshot: campaign.snapshot(&claim_id)?,
            report: None,
        }))
    })
    .await
}

async fn reports(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ReportSet>, ApiError> {
    blocking(move || {
        let shared = state.campaign(&id)?;
        let campaign = lock(&shared);
        Ok(Json(ReportSet::new(campaign.reports())))
    })
    .await
}

async fn classify_route(
    State(state): State<AppState>,
    payload: Result<Json<ClassifyRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = payload?;
    blocking(move || {
        let (taxonomy, scores, campaign_reports) = match &req.campaign_id {
            Some(id) => {
                if req.taxonomy.is_some() || req.scores.is_some() {
                    return Err(ApiError::invalid(
                        "campaign_id",
                        "give either campaign_id or taxonomy and scores, not both",
                    ));
                }
                let shared = state.campaign(id)?;
                let c = lock(&shared);
                (c.taxonomy().clone(), c.scores().clone(), c.reports())
            }
            None => {
                let (Some(t), Some(s)) = (&req.taxonomy, &req.scores) else {
                    return Err(ApiError::invalid(
                        "taxonomy",
                        "taxonomy and scores are required without campaign_id",
                    ));
                };
                (load_taxonomy(t)?, load_scores(s)?, Vec::new())
            }
        };
        let thresholds = if req.zero_shot {
            ThresholdSet::uniform(&taxonomy, ZERO_SHOT_THRESHOLD)
        } else if let Some(map) = &req.thresholds {
            ThresholdSet(map.clone())
        } else {
            ThresholdSet::from_reports(&campaign_reports)
        };
        thresholds.check(&taxonomy, scores.range())?;
        let opts = DetectOptions {
            comparator: req.comparator,
            negation_filter: req.negation_filter,
        };
        let predictions: Vec<PredictionRecord> = classify(&scores, &thresholds, &taxonomy, opts)?;
        Ok(ok(
            json!({ "format": FORMAT_VERSION, "predictions": predictions }),
        ))
    })
    .await
}

// ---------------------------------------------------------------------------

pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/campaigns", get(list_campaigns).post(create_campaign))
        .route("/campaigns/{id}", get(get_campaign))
        .route("/campaigns/{id}/reports", get(reports))
        .route("/campaigns/{id}/claims/{claim}/next", get(next_item))
        .route(
            "/campaigns/{id}/claims/{claim}/annotations",
            post(post_annotation),
        )
        .route("/campaigns/{id}/undo/{claim}", post(undo))
        .route("/classify", post(classify_route))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(&config.data_dir)?;
    let app = router(state, config.ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
