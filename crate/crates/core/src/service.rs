//! Local JSON-over-HTTP service: schema, prediction with heatmaps, and
//! per-session cumulative concept interventions.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::alignment::ConceptScores;
use crate::data::{decode_image, Sample};
use crate::diagnosis::Diagnosis;
use crate::error::{CopaError, Result};
use crate::harness::explain::concept_heatmaps;
use crate::intervention::{intervene, EditMode, InterventionSpec, Renormalization};
use crate::model::{CopaModel, Prediction};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Largest accepted request body.
    pub max_body_bytes: usize,
    /// Largest accepted encoded image after base64 decoding.
    pub max_image_bytes: usize,
    pub session_ttl: Duration,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    pub renormalization: Renormalization,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 8 * 1024 * 1024,
            max_image_bytes: 4 * 1024 * 1024,
            session_ttl: Duration::from_secs(30 * 60),
            cors_origin: None,
            renormalization: Renormalization::Softmax,
        }
    }
}

struct Session {
    base: Prediction,
    edits: BTreeMap<usize, InterventionSpec>,
}

struct Slot {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

pub struct AppState {
    model: Option<Arc<CopaModel>>,
    samples: HashMap<String, Sample>,
    sessions: Mutex<HashMap<String, Slot>>,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(model: Option<CopaModel>, config: ServiceConfig) -> Self {
        Self {
            model: model.map(Arc::new),
            samples: HashMap::new(),
            sessions: Mutex::new(HashMap::new()),
            config,
        }
    }

    /// Registers samples addressable by `sample_id` in `/v1/predict`.
    pub fn with_samples(mut self, samples: impl IntoIterator<Item = Sample>) -> Self {
        self.samples.extend(samples.into_iter().map(|s| (s.id.clone(), s)));
        self
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    fn model(&self) -> Result<Arc<CopaModel>, ApiError> {
        self.model.clone().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_checkpoint", "no checkpoint is loaded")
        })
    }

    fn touch(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().expect("session map");
        self.evict(&mut map);
        let slot = map
            .get_mut(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}")))?;
        slot.last_used = Instant::now();
        Ok(slot.session.clone())
    }

    fn insert(&self, id: String, session: Session) {
        let mut map = self.sessions.lock().expect("session map");
        self.evict(&mut map);
        map.insert(
            id,
            Slot {
                session: Arc::new(tokio::sync::Mutex::new(session)),
                last_used: Instant::now(),
            },
        );
    }

    fn evict(&self, map: &mut HashMap<String, Slot>) {
        let ttl = self.config.session_ttl;
        map.retain(|_, s| s.last_used.elapsed() < ttl);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl From<CopaError> for ApiError {
    fn from(e: CopaError) -> Self {
        let status = match &e {
            CopaError::Io { .. } | CopaError::Checkpoint(_) | CopaError::NonFinite { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body.map_err(|r| {
        let status = r.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "bad_body" };
        ApiError::new(status, code, r.body_text())
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_json", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaPayload {
    pub concepts: Vec<SchemaConcept>,
    pub disease_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConcept {
    pub index: usize,
    pub title: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisPayload {
    pub predicted: usize,
    pub class: String,
    pub confidence: f64,
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl DiagnosisPayload {
    fn new(model: &CopaModel, d: &Diagnosis) -> Self {
        Self {
            predicted: d.predicted,
            class: model.schema.disease_classes[d.predicted].clone(),
            confidence: d.confidence(),
            probabilities: d.probabilities.to_vec(),
            logits: d.logits.to_vec(),
            alpha: d.alpha.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPayload {
    pub index: usize,
    pub title: String,
    pub candidates: Vec<String>,
    pub probabilities: Vec<f64>,
    /// Masked logits are `null`.
    pub logits: Vec<Option<f64>>,
    pub predicted: usize,
    pub confidence: f64,
}

fn concept_payloads(model: &CopaModel, scores: &[ConceptScores]) -> Vec<ConceptPayload> {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = s.predicted();
            ConceptPayload {
                index: i,
                title: model.schema.concepts[i].title.clone(),
                candidates: model.schema.concepts[i].candidates.clone(),
                probabilities: s.probabilities.to_vec(),
                logits: s.logits.iter().map(|v| v.is_finite().then_some(*v)).collect(),
                predicted: p.index,
                confidence: p.confidence,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPayload {
    pub concept: usize,
    /// Patch-grid matrix summing to 1.
    pub grid: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorPayload {
    pub depths: Vec<usize>,
    /// One row per concept.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictPayload {
    pub session: String,
    pub diagnosis: DiagnosisPayload,
    pub concepts: Vec<ConceptPayload>,
    pub heatmaps: Vec<HeatmapPayload>,
    pub selector: SelectorPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub diagnosis: DiagnosisPayload,
    pub concepts: Vec<ConceptPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPayload {
    pub session: String,
    pub edits: Vec<EditPayload>,
    pub pre: StatePayload,
    pub post: StatePayload,
    pub changed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPayload {
    pub concept: usize,
    pub mode: EditMode,
    pub candidate: usize,
}

impl From<InterventionSpec> for EditPayload {
    fn from(s: InterventionSpec) -> Self {
        Self {
            concept: s.concept,
            mode: s.mode,
            candidate: s.candidate,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    image: Option<String>,
    sample_id: Option<String>,
    session: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterveneRequest {
    session: String,
    #[serde(default)]
    edits: Vec<EditPayload>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    session: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetPayload {
    pub session: String,
    pub edits: Vec<EditPayload>,
}

async fn schema(State(state): State<Arc<AppState>>) -> ApiResult<SchemaPayload> {
    let model = state.model()?;
    Ok(Json(SchemaPayload {
        concepts: model
            .schema
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| SchemaConcept {
                index: i,
                title: c.title.clone(),
                candidates: c.candidates.clone(),
            })
            .collect(),
        disease_classes: model.schema.disease_classes.clone(),
    }))
}

async fn checksum(State(state): State<Arc<AppState>>) -> ApiResult<Value> {
    let model = state.model()?;
    Ok(Json(json!({ "checksum": model.checksum() })))
}

async fn predict(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult<PredictPayload> {
    let model = state.model()?;
    let req: PredictRequest = parse_body(body)?;
    let image = match (&req.image, &req.sample_id) {
        (Some(b64), None) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", format!("invalid base64: {e}")))?;
            if bytes.len() > state.config.max_image_bytes {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    "image_too_large",
                    format!("image is {} bytes, limit {}", bytes.len(), state.config.max_image_bytes),
                ));
            }
            decode_image(&bytes, model.config.backbone.image_size)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?
        }
        (None, Some(id)) => state
            .samples
            .get(id)
            .map(|s| s.image.clone())
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_sample", format!("no sample {id:?}")))?,
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                "exactly one of image or sample_id is required",
            ))
        }
    };
    if let Some(id) = &req.session {
        state.touch(id)?;
    }
    let m = model.clone();
    let prediction = tokio::task::spawn_blocking(move || m.predict(&image))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let heatmaps = concept_heatmaps(&model, &prediction)
        .into_iter()
        .enumerate()
        .map(|(i, h)| HeatmapPayload {
            concept: i,
            grid: h.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
        .collect();
    let session = req.session.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let payload = PredictPayload {
        session: session.clone(),
        diagnosis: DiagnosisPayload::new(&model, &prediction.diagnosis),
        concepts: concept_payloads(&model, &prediction.scores),
        heatmaps,
        selector: SelectorPayload {
            depths: prediction.selector_depths.clone(),
            weights: prediction.selector_weights.rows().into_iter().map(|r| r.to_vec()).collect(),
        },
    };
    state.insert(
        session,
        Session {
            base: prediction,
            edits: BTreeMap::new(),
        },
    );
    Ok(Json(payload))
}

async fn intervene_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<InterventionPayload> {
    let model = state.model()?;
    let req: InterveneRequest = parse_body(body)?;
    let slot = state.touch(&req.session)?;
    let mut session = slot.lock().await;

    let n = model.n_concepts();
    let mut incoming: BTreeMap<usize, InterventionSpec> = BTreeMap::new();
    for e in &req.edits {
        if e.concept >= n {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_edit",
                format!("concept {} out of range 0..{n}", e.concept),
            ));
        }
        let k = model.schema.concepts[e.concept].k();
        if e.candidate >= k {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_edit",
                format!("candidate {} out of range 0..{k} for concept {}", e.candidate, e.concept),
            ));
        }
        let spec = InterventionSpec {
            concept: e.concept,
            mode: e.mode,
            candidate: e.candidate,
        };
        let conflict = |existing: &InterventionSpec| {
            ApiError::new(StatusCode::CONFLICT, "conflicting_edit", format!("concept {} already has a different edit", e.concept))
                .with_detail(json!({ "existing": EditPayload::from(*existing), "requested": e }))
        };
        if let Some(prev) = incoming.get(&e.concept).or_else(|| session.edits.get(&e.concept)) {
            if *prev != spec {
                return Err(conflict(prev));
            }
        }
        incoming.insert(e.concept, spec);
    }
    let mut merged = session.edits.clone();
    merged.extend(incoming);
    let specs: Vec<InterventionSpec> = merged.values().copied().collect();
    let result = intervene(&model, &session.base, &specs, state.config.renormalization)?;
    session.edits = merged;
    Ok(Json(InterventionPayload {
        session: req.session,
        edits: specs.into_iter().map(EditPayload::from).collect(),
        pre: StatePayload {
            diagnosis: DiagnosisPayload::new(&model, &result.pre_diagnosis),
            concepts: concept_payloads(&model, &session.base.scores),
        },
        post: StatePayload {
            diagnosis: DiagnosisPayload::new(&model, &result.post_diagnosis),
            concepts: concept_payloads(&model, &result.scores),
        },
        changed: result.changed,
    }))
}

async fn reset(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult<ResetPayload> {
    state.model()?;
    let req: SessionRequest = parse_body(body)?;
    let slot = state.touch(&req.session)?;
    slot.lock().await.edits.clear();
    Ok(Json(ResetPayload {
        session: req.session,
        edits: Vec::new(),
    }))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]);
    let cors = match state.config.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(AllowOrigin::exact(origin)),
        _ => cors.allow_origin(Any),
    };
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/schema", get(schema))
        .route("/v1/checksum", get(checksum))
        .route("/v1/predict", post(predict))
        .route("/v1/intervene", post(intervene_handler))
        .route("/v1/reset", post(reset))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(Arc::new(state))
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CopaError::io(format!("bind {addr}"), e))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| CopaError::io("listener", e))?);
    axum::serve(listener, router(state))
        .await
        .map_err(|e| CopaError::io("server", e))
}
