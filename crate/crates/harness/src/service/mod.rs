//! HTTP service behind the interactive annotation UI.
//!
//! Sessions are isolated from each other; mutations of one session are
//! serialized by its own lock, held across the backend call so a slice never
//! has two prompt requests in flight.

pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use promptseg_core::backend::{
    self, BoxPrompt, PointPrompt, PredictionTriple, SegmentationRequest, Segmenter,
};
use promptseg_core::fusion::{stack_slices, volumetric_dice};
use promptseg_core::mask::{iou, BinaryMask2D, RleMask};
use promptseg_core::prompt_sim::{select_mask, Grade, PolicyKind, SelectionPolicy, MAX_POINTS};
use promptseg_core::volume::{
    encode_volume, extract_slice, normalize_intensities, tumor_core_mask, BinaryVolume,
    NiftiDatatype, Orientation, SliceImage, Volume,
};

use crate::manifest::CaseManifest;
use session::{Candidates, CommitError, Session, SessionEvent, SessionRecord, StateError};

pub const GT_HEADER: &str = "x-gt-available";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub dataset_root: PathBuf,
    pub manifest: CaseManifest,
    pub core_labels: Vec<i32>,
    pub session_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
}

struct CaseData {
    normalized: Volume,
    core: Option<BinaryVolume>,
}

type SessionHandle = Arc<tokio::sync::Mutex<SessionRecord>>;

pub struct AppState {
    cfg: ServiceConfig,
    backend: Arc<dyn Segmenter>,
    cases: Mutex<HashMap<String, Arc<CaseData>>>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl AppState {
    /// Creates the session directory and replays every session log in it.
    pub fn new(
        cfg: ServiceConfig,
        backend: Arc<dyn Segmenter>,
    ) -> Result<Self, session::LoadError> {
        std::fs::create_dir_all(&cfg.session_dir)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&cfg.session_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let rec = SessionRecord::load(&path)?;
                sessions.insert(rec.state.id.clone(), Arc::new(tokio::sync::Mutex::new(rec)));
            }
        }
        tracing::info!(sessions = sessions.len(), "sessions restored");
        Ok(AppState {
            cfg,
            backend,
            cases: Mutex::new(HashMap::new()),
            sessions: RwLock::new(sessions),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .expect("sessions lock")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    /// Current state of a session, for tests and diagnostics.
    pub async fn session_state(&self, id: &str) -> Option<Session> {
        let h = self
            .sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()?;
        let s = h.lock().await.state.clone();
        Some(s)
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session '{id}'")))
    }

    async fn case(self: &Arc<Self>, id: &str) -> Result<Arc<CaseData>, ApiError> {
        if let Some(c) = self.cases.lock().expect("case cache lock").get(id) {
            return Ok(c.clone());
        }
        let entry = self
            .cfg
            .manifest
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown case '{id}'")))?;
        let this = self.clone();
        let data = tokio::task::spawn_blocking(move || -> Result<CaseData, String> {
            let root = &this.cfg.dataset_root;
            let intensity = entry.load_intensity(root).map_err(|e| e.to_string())?;
            let normalized = normalize_intensities(&intensity).map_err(|e| e.to_string())?;
            let core = match entry.labels {
                Some(_) => {
                    let labels = entry.load_labels(root).map_err(|e| e.to_string())?;
                    Some(
                        tumor_core_mask(&labels, &this.cfg.core_labels)
                            .map_err(|e| e.to_string())?,
                    )
                }
                None => None,
            };
            Ok(CaseData { normalized, core })
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::internal)?;
        let data = Arc::new(data);
        self.cases
            .lock()
            .expect("case cache lock")
            .insert(id.to_string(), data.clone());
        Ok(data)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, m)
    }

    fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, m)
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        let status = match e {
            StateError::SliceOutOfRange(_) => StatusCode::NOT_FOUND,
            StateError::BadIndex(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::CONFLICT,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<CommitError> for ApiError {
    fn from(e: CommitError) -> Self {
        match e {
            CommitError::State(s) => s.into(),
            CommitError::Io(e) => ApiError::internal(format!("cannot persist session: {e}")),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::unprocessable(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: Session,
    pub persisted_at: String,
    pub gt_available: bool,
}

fn view(rec: &SessionRecord, gt_available: bool) -> SessionView {
    SessionView {
        session: rec.state.clone(),
        persisted_at: rec.persisted_at.clone(),
        gt_available,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub case_id: String,
    pub orientation: Orientation,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub start_slice: Option<usize>,
}

fn default_policy() -> PolicyKind {
    PolicyKind::PreviousSlice
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBody {
    #[serde(default)]
    pub point: Option<PointPrompt>,
    #[serde(default, rename = "box")]
    pub bbox: Option<BoxPrompt>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PromptResponse {
    pub slice: usize,
    pub candidates: Vec<RleMask>,
    pub predicted_iou: [f64; 3],
    pub preselected_index: usize,
    /// Where the preselection came from: a neighbor slice, GT, or confidence.
    pub preselected_by: String,
    pub n_points: usize,
    pub budget_exceeded: bool,
    /// IoU of each candidate against ground truth, when GT is available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_iou: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectBody {
    pub index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FuseResponse {
    pub case_id: String,
    pub orientation: Orientation,
    pub finalized_slices: usize,
    pub foreground_voxels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseSummary {
    pub id: String,
    pub grade: Grade,
    pub gt_available: bool,
}

pub fn router(state: Arc<AppState>) -> Router {
    let r = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/cases", get(list_cases))
        .route("/v1/cases/{id}/slices/{orientation}/{k}", get(get_slice))
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/slices/{k}/prompts", post(prompt))
        .route("/v1/sessions/{id}/slices/{k}/select", post(select))
        .route("/v1/sessions/{id}/slices/{k}/finalize", post(finalize))
        .route("/v1/sessions/{id}/fuse", post(fuse))
        .route("/v1/sessions/{id}/export", get(export));
    let r = match &state.cfg.static_dir {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r,
    };
    r.with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "backend": s.backend.id() }))
}

async fn list_cases(State(s): State<Arc<AppState>>) -> Json<Vec<CaseSummary>> {
    Json(
        s.cfg
            .manifest
            .cases
            .iter()
            .map(|c| CaseSummary {
                id: c.id.clone(),
                grade: c.grade,
                gt_available: c.labels.is_some(),
            })
            .collect(),
    )
}

async fn list_sessions(State(s): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(s.session_ids())
}

fn parse_orientation(s: &str) -> ApiResult<Orientation> {
    s.parse()
        .map_err(|_| ApiError::unprocessable(format!("unknown orientation '{s}'")))
}

fn slice_image(case: &CaseData, o: Orientation, k: usize) -> ApiResult<SliceImage> {
    let n = case.normalized.slice_count(o);
    if k >= n {
        return Err(ApiError::not_found(format!(
            "slice {k} out of range (0..{n})"
        )));
    }
    extract_slice(&case.normalized, o, k).map_err(|e| ApiError::internal(e.to_string()))
}

fn encode_png(img: &SliceImage) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(img.pixels())?;
    w.finish()?;
    Ok(out)
}

async fn get_slice(
    State(s): State<Arc<AppState>>,
    Path((id, orientation, k)): Path<(String, String, usize)>,
) -> ApiResult<Response> {
    let o = parse_orientation(&orientation)?;
    let case = s.case(&id).await?;
    let img = slice_image(&case, o, k)?;
    let png = encode_png(&img).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (
                header::HeaderName::from_static(GT_HEADER),
                case.core.is_some().to_string(),
            ),
        ],
        png,
    )
        .into_response())
}

async fn create_session(
    State(s): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let Json(req) = body?;
    let case = s.case(&req.case_id).await?;
    let n_slices = case.normalized.slice_count(req.orientation);
    let start_slice = match req.start_slice {
        Some(k) if k >= n_slices => {
            return Err(ApiError::unprocessable(format!(
                "start_slice {k} out of range (0..{n_slices})"
            )))
        }
        Some(k) => k,
        // first slice with tumor when GT is known, otherwise the middle
        None => case
            .core
            .as_ref()
            .and_then(|c| {
                (0..n_slices).find(|&k| c.slice(req.orientation, k).is_ok_and(|m| !m.is_empty()))
            })
            .unwrap_or(n_slices / 2),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut rec = SessionRecord::create(SessionEvent::Created {
        id: id.clone(),
        case_id: req.case_id,
        orientation: req.orientation,
        policy: req.policy,
        n_slices,
        start_slice,
    })?;
    rec.persist(&s.cfg.session_dir)
        .map_err(|e| ApiError::internal(format!("cannot persist session: {e}")))?;
    let v = view(&rec, case.core.is_some());
    s.sessions
        .write()
        .expect("sessions lock")
        .insert(id, Arc::new(tokio::sync::Mutex::new(rec)));
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_session(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let h = s.session(&id)?;
    let rec = h.lock().await;
    let gt = s
        .cfg
        .manifest
        .get(&rec.state.case_id)
        .is_some_and(|c| c.labels.is_some());
    Ok(Json(view(&rec, gt)))
}

/// Chooses the candidate to preselect and names the rule that chose it.
fn preselect(
    session: &Session,
    k: usize,
    triple: &PredictionTriple,
    gt: Option<&BinaryMask2D>,
) -> Result<(usize, &'static str), String> {
    let (w, h) = triple.masks[0].dims();
    let placeholder = BinaryMask2D::new(w, h);
    let truth = gt.unwrap_or(&placeholder);
    let neighbor = match session.policy {
        PolicyKind::PreviousSlice => session
            .nearest_finalized(k)
            .map(|(_, m)| m.decode())
            .transpose()
            .map_err(|e| e.to_string())?,
        _ => None,
    };
    let (policy, by) = match (&neighbor, session.policy, gt) {
        (Some(prev), _, _) => (SelectionPolicy::previous_slice(prev), "previous_slice"),
        (None, PolicyKind::Oracle, Some(_)) => (SelectionPolicy::oracle(), "oracle"),
        _ => (SelectionPolicy::suggested(), "suggested"),
    };
    let (i, _) = select_mask(&policy, triple, truth).map_err(|e| e.to_string())?;
    Ok((i, by))
}

async fn prompt(
    State(s): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    body: Result<Json<PromptBody>, JsonRejection>,
) -> ApiResult<Json<PromptResponse>> {
    let Json(body) = body?;
    if body.point.is_none() && body.bbox.is_none() {
        return Err(ApiError::unprocessable("a prompt needs a point or a box"));
    }
    let h = s.session(&id)?;
    let mut rec = h.lock().await;
    rec.state.check_mutable(k)?;
    let case = s.case(&rec.state.case_id).await?;
    let orientation = rec.state.orientation;
    let image = slice_image(&case, orientation, k)?;
    let gt = case
        .core
        .as_ref()
        .map(|c| c.slice(orientation, k))
        .transpose()
        .map_err(|e| ApiError::internal(e.to_string()))?;

    let existing = rec.state.slice(k).cloned().unwrap_or_default();
    let mut points = existing.points.clone();
    points.extend(body.point);
    let bbox = body.bbox.or(existing.bbox);
    SegmentationRequest::new(&image, &points, bbox)
        .validate()
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;

    let backend = s.backend.clone();
    let (img, pts, gt_for_prime) = (image.clone(), points.clone(), gt.clone());
    let triple = tokio::task::spawn_blocking(move || {
        if let Some(g) = &gt_for_prime {
            backend.prime(&img, g);
        }
        backend::predict(
            backend.as_ref(),
            &SegmentationRequest::new(&img, &pts, bbox),
        )
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;

    let (preselected_index, by) =
        preselect(&rec.state, k, &triple, gt.as_ref()).map_err(ApiError::internal)?;
    let gt_iou = match &gt {
        Some(g) => {
            let f =
                |i: usize| iou(&triple.masks[i], g).map_err(|e| ApiError::internal(e.to_string()));
            Some([f(0)?, f(1)?, f(2)?])
        }
        None => None,
    };
    let candidates = Candidates {
        masks: triple.masks.iter().map(RleMask::encode).collect(),
        predicted_iou: triple.predicted_iou,
        preselected_index,
    };
    rec.commit(
        SessionEvent::Prompted {
            slice: k,
            point: body.point,
            bbox: body.bbox,
            candidates: candidates.clone(),
        },
        &s.cfg.session_dir,
    )?;
    Ok(Json(PromptResponse {
        slice: k,
        candidates: candidates.masks,
        predicted_iou: candidates.predicted_iou,
        preselected_index,
        preselected_by: by.to_string(),
        n_points: points.len(),
        budget_exceeded: points.len() > MAX_POINTS,
        gt_iou,
    }))
}

async fn select(
    State(s): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    body: Result<Json<SelectBody>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let Json(body) = body?;
    let h = s.session(&id)?;
    let mut rec = h.lock().await;
    rec.commit(
        SessionEvent::Selected {
            slice: k,
            index: body.index,
        },
        &s.cfg.session_dir,
    )?;
    let gt = s
        .cfg
        .manifest
        .get(&rec.state.case_id)
        .is_some_and(|c| c.labels.is_some());
    Ok(Json(view(&rec, gt)))
}

async fn finalize(
    State(s): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
) -> ApiResult<Json<SessionView>> {
    let h = s.session(&id)?;
    let mut rec = h.lock().await;
    rec.commit(SessionEvent::Finalized { slice: k }, &s.cfg.session_dir)?;
    let gt = s
        .cfg
        .manifest
        .get(&rec.state.case_id)
        .is_some_and(|c| c.labels.is_some());
    Ok(Json(view(&rec, gt)))
}

fn stacked(session: &Session, case: &CaseData) -> ApiResult<(BinaryVolume, usize)> {
    let masks = session
        .finalized_masks()
        .map(|(k, m)| m.decode().map(|m| (k, m)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let refs: Vec<(usize, &BinaryMask2D)> = masks.iter().map(|(k, m)| (*k, m)).collect();
    let v = &case.normalized;
    let s = stack_slices(v.dims(), v.spacing(), session.orientation, &refs)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((s.volume, masks.len()))
}

async fn fuse(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<FuseResponse>> {
    let h = s.session(&id)?;
    let session = h.lock().await.state.clone();
    let case = s.case(&session.case_id).await?;
    let (vol, n) = stacked(&session, &case)?;
    let dice = case
        .core
        .as_ref()
        .map(|gt| volumetric_dice(&vol, gt))
        .transpose()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(FuseResponse {
        case_id: session.case_id,
        orientation: session.orientation,
        finalized_slices: n,
        foreground_voxels: vol.count(),
        dice,
    }))
}

async fn export(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = s.session(&id)?;
    let session = h.lock().await.state.clone();
    let case = s.case(&session.case_id).await?;
    let (vol, _) = stacked(&session, &case)?;
    let bytes = encode_volume(&vol.to_label_volume(), NiftiDatatype::Uint8)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let name = format!(
        "{}_{}_{}.nii",
        session.case_id, session.orientation, session.id
    );
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{name}\""),
            ),
        ],
        Body::from(bytes),
    )
        .into_response())
}
