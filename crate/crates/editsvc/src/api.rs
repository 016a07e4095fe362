use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use drivedit_core::backends::BackendSet;
use drivedit_core::banks;
use drivedit_core::descriptor::DescriptorConfig;
use drivedit_core::maskio::encode_mask;
use drivedit_core::types::GlobalCategory;
use drivedit_core::{EditAction, EditSpec, Error, Image, SceneAnnotation};

use crate::session::{EditRequest, EditSession, HistoryEntry};
use crate::store::{SessionHandle, SessionStore};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub descriptor: DescriptorConfig,
    /// Upper bound on one generator call.
    pub render_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorConfig::default(),
            render_timeout: Duration::from_secs(60),
        }
    }
}

pub struct AppState {
    pub backends: BackendSet,
    pub store: SessionStore,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(backends: BackendSet, store: SessionStore, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            backends,
            store,
            config,
        })
    }
}

/// JSON error body `{code, message}` with a matching status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::InvalidInput(_) | Error::Shape(_) | Error::MaskFormat(_) | Error::Codec(_) | Error::Json(_) => {
                (StatusCode::BAD_REQUEST, "invalid_input")
            }
            Error::Backend { .. } => (StatusCode::BAD_GATEWAY, "backend_error"),
            Error::Blend(_) => (StatusCode::UNPROCESSABLE_ENTITY, "blend_rejected"),
            Error::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_json", e.to_string()))
}

fn session(state: &AppState, id: &str) -> ApiResult<SessionHandle> {
    state.store.get(id).ok_or_else(|| ApiError::not_found(id))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> drivedit_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Serialize, Deserialize)]
pub struct CreateSession {
    pub image_png_base64: String,
    #[serde(default)]
    pub image_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub annotation: SceneAnnotation,
}

#[derive(Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub annotation: SceneAnnotation,
    pub edits: Vec<EditSpec>,
    pub history: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct RenderRequest {
    #[serde(default)]
    pub global_prompt: String,
}

#[derive(Serialize, Deserialize)]
pub struct RenderResponse {
    pub preview_png_base64: String,
    pub history_len: usize,
}

#[derive(Serialize, Deserialize)]
pub struct BankView {
    pub actions: Vec<String>,
    pub vehicle_colors: Vec<String>,
    pub vehicle_objects: Vec<String>,
    pub clothing_adjectives: Vec<String>,
    pub clothing_articles: Vec<String>,
    pub ages: Vec<String>,
    pub traffic_light_colors: Vec<String>,
    pub global_values: Vec<(String, Vec<String>)>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/banks", get(get_banks))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/image.png", get(get_image))
        .route("/sessions/{id}/edits", post(add_edit))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/mask.png", get(get_mask_png))
        .route("/sessions/{id}/render", post(render))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn get_banks() -> Json<BankView> {
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Json(BankView {
        actions: [
            EditAction::Insert,
            EditAction::Delete,
            EditAction::Modify,
            EditAction::Replace,
        ]
        .iter()
        .map(|a| a.as_str().to_string())
        .collect(),
        vehicle_colors: owned(banks::VEHICLE_COLORS),
        vehicle_objects: owned(banks::VEHICLE_OBJECTS),
        clothing_adjectives: owned(banks::CLOTHING_ADJECTIVES),
        clothing_articles: owned(banks::CLOTHING_ARTICLES),
        ages: owned(banks::AGES),
        traffic_light_colors: owned(banks::TRAFFIC_LIGHT_COLORS),
        global_values: GlobalCategory::ALL
            .iter()
            .map(|c| (c.phrase().to_string(), owned(&c.values())))
            .collect(),
    })
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = parse(&body)?;
    let png = B64.decode(req.image_png_base64.trim()).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_input",
            format!("image is not base64: {e}"),
        )
    })?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let image_id = req.image_id.unwrap_or_else(|| id.clone());
    let st = state.clone();
    let sid = id.clone();
    let s = blocking(move || {
        let image = Image::decode_png(&png)?;
        EditSession::create(sid, &image_id, image, &st.backends, &st.config.descriptor)
    })
    .await?;
    let annotation = s.annotation.clone();
    state.store.insert(s)?;
    tracing::info!(session = %id, instances = annotation.instances.len(), "session created");
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: id,
            annotation,
        }),
    ))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let h = session(&state, &id)?;
    let s = h.lock().await;
    let (width, height) = s.image.dims();
    Ok(Json(SessionView {
        session_id: s.id.clone(),
        width,
        height,
        annotation: s.annotation.clone(),
        edits: s.specs.clone(),
        history: s.history().iter().map(|e| e.prompt.clone()).collect(),
    }))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = session(&state, &id)?;
    let s = h.lock().await;
    Ok(png(s.image.encode_png()?))
}

async fn add_edit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: EditRequest = parse(&body)?;
    let h = session(&state, &id)?;
    let mut s = h.lock().await;
    let spec = s.add_edit(&req, &state.backends)?;
    if let Err(e) = state.store.save(&s) {
        s.specs.pop();
        return Err(e.into());
    }
    Ok((StatusCode::CREATED, Json(spec)))
}

async fn get_mask(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = session(&state, &id)?;
    let s = h.lock().await;
    let bytes = encode_mask(&s.mask(&state.backends)?)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn get_mask_png(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = session(&state, &id)?;
    let s = h.lock().await;
    Ok(png(s.mask(&state.backends)?.project_binary().encode_png()?))
}

async fn render(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<RenderResponse>> {
    let req: RenderRequest = if body.is_empty() {
        RenderRequest {
            global_prompt: String::new(),
        }
    } else {
        parse(&body)?
    };
    let h = session(&state, &id)?;
    // The lock is held across the backend call so renders of one session
    // stay ordered.
    let mut s = h.lock().await;
    let mask = s.mask(&state.backends)?;
    let image = s.image.clone();
    let generator = state.backends.generator.clone();
    let (prompt, m) = (req.global_prompt.clone(), mask.clone());
    let call = blocking(move || generator.edit(&image, &prompt, Some(&m)));
    let preview = tokio::time::timeout(state.config.render_timeout, call)
        .await
        .map_err(|_| {
            ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                "backend_timeout",
                format!("generator did not answer within {:?}", state.config.render_timeout),
            )
        })??;
    if preview.dims() != s.image.dims() {
        return Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            "backend_error",
            "generator changed the image size",
        ));
    }
    let encoded = preview.encode_png()?;
    s.push_history(HistoryEntry {
        prompt: req.global_prompt,
        mask,
        preview,
    });
    state.store.save(&s)?;
    Ok(Json(RenderResponse {
        preview_png_base64: B64.encode(encoded),
        history_len: s.history().len(),
    }))
}
