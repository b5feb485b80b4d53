use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use scenelayers::datastore::{
    CorrectedVerdict, Decision, LabelStore, ModelAnnotation, Progress, ReviewError, ReviewState,
    ReviewSubmission,
};
use scenelayers::imageprep::{resize, ImageInput, MediaType, ResolutionLevel};
use scenelayers::{GoldLabel, SceneLayer};

use crate::lease::LeaseTable;

/// Header carrying the reviewer id.
pub const REVIEWER_HEADER: &str = "x-reviewer";

pub(crate) struct Shared {
    pub store: LabelStore,
    pub leases: LeaseTable,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Shared>>,
}

impl AppState {
    pub(crate) fn new(store: LabelStore, leases: LeaseTable) -> Self {
        AppState {
            inner: Arc::new(Mutex::new(Shared { store, leases })),
        }
    }

    /// Copy of the live dataset.
    pub fn snapshot(&self) -> scenelayers::datastore::Dataset {
        self.lock().store.dataset().clone()
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, Shared> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: AppState, ui_dir: Option<&std::path::Path>) -> Router {
    let api = Router::new()
        .route("/api/queue/next", get(next_item))
        .route("/api/items/{id}/review", post(review))
        .route("/api/items/{id}/image", get(image))
        .route("/api/progress", get(progress))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: message.into(),
            rules: Vec::new(),
        }),
    )
        .into_response()
}

fn reviewer_from(headers: &HeaderMap, fallback: Option<String>) -> Option<String> {
    headers
        .get(REVIEWER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or(fallback)
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemPayload {
    pub id: String,
    pub image_url: String,
    /// The rendition the model saw.
    pub model_image_url: String,
    pub review: ReviewState,
    #[serde(default)]
    pub gold: Option<GoldLabel>,
    #[serde(default)]
    pub annotation: Option<ModelAnnotation>,
    pub lease_seconds: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueResponse {
    pub item: Option<ItemPayload>,
    pub progress: Progress,
}

#[derive(Debug, Deserialize)]
struct ReviewerQuery {
    reviewer: Option<String>,
}

async fn next_item(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<ReviewerQuery>,
) -> Response {
    let Some(reviewer) = reviewer_from(&headers, q.reviewer) else {
        return error(StatusCode::BAD_REQUEST, "reviewer id required");
    };
    let now = Instant::now();
    let mut guard = state.lock();
    let Shared { store, leases } = &mut *guard;
    let open = |id: &str| {
        store
            .dataset()
            .get(id)
            .is_some_and(|r| r.review == ReviewState::Unreviewed)
            && leases.holder(id, now).is_none_or(|h| h == reviewer)
    };
    let held = leases
        .held_by(&reviewer, now)
        .filter(|id| open(id))
        .map(str::to_string);
    let pick = held.or_else(|| {
        store
            .dataset()
            .records
            .iter()
            .filter(|r| open(&r.id))
            .map(|r| r.id.as_str())
            .min()
            .map(str::to_string)
    });
    let item = pick.map(|id| {
        leases
            .acquire(&id, &reviewer, now)
            .expect("item checked free");
        let r = store.dataset().get(&id).expect("item exists");
        ItemPayload {
            image_url: format!("/api/items/{id}/image"),
            model_image_url: format!("/api/items/{id}/image?p={}", ResolutionLevel::P360.height()),
            review: r.review,
            gold: r.gold.clone(),
            annotation: r.annotation.clone(),
            lease_seconds: leases.ttl().as_secs(),
            id,
        }
    });
    Json(QueueResponse {
        item,
        progress: store.progress(),
    })
    .into_response()
}

/// Review body; the reviewer may come from the header instead.
#[derive(Debug, Deserialize)]
struct ReviewBody {
    #[serde(default)]
    reviewer: Option<String>,
    decision: Decision,
    #[serde(default)]
    corrected: Option<CorrectedVerdict>,
    #[serde(default)]
    descriptions: std::collections::BTreeMap<SceneLayer, String>,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub item_id: String,
    pub seq: u64,
    pub review: ReviewState,
    pub gold: GoldLabel,
    pub progress: Progress,
}

async fn review(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ReviewBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let Some(reviewer) = reviewer_from(&headers, body.reviewer) else {
        return error(StatusCode::BAD_REQUEST, "reviewer id required");
    };
    let now = Instant::now();
    let mut guard = state.lock();
    let Shared { store, leases } = &mut *guard;
    if store.dataset().get(&id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown item `{id}`"));
    }
    if let Some(holder) = leases.holder(&id, now).filter(|h| *h != reviewer) {
        return error(
            StatusCode::CONFLICT,
            format!("item `{id}` is leased by `{holder}`"),
        );
    }
    let submission = ReviewSubmission {
        reviewer,
        decision: body.decision,
        corrected: body.corrected,
        descriptions: body.descriptions,
        note: body.note,
    };
    match store.review(&id, &submission) {
        Ok(entry) => {
            leases.release(&id);
            let record = store.dataset().get(&id).expect("reviewed item exists");
            let response = ReviewResponse {
                item_id: id,
                seq: entry.seq,
                review: record.review,
                gold: entry.gold,
                progress: store.progress(),
            };
            Json(response).into_response()
        }
        Err(ReviewError::NotFound(id)) => {
            error(StatusCode::NOT_FOUND, format!("unknown item `{id}`"))
        }
        Err(ReviewError::Invalid(rules)) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(ErrorBody {
                error: format!("invalid review: {}", rules.join("; ")),
                rules,
            }),
        )
            .into_response(),
        Err(e @ ReviewError::Store(_)) => {
            log::error!("review of `{id}` failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    p: Option<u32>,
}

async fn image(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
) -> Response {
    let level = match q.p.map(ResolutionLevel::from_height) {
        Some(None) => {
            return error(
                StatusCode::BAD_REQUEST,
                "p must be one of 180, 240, 360, 540, 720",
            )
        }
        Some(Some(level)) => Some(level),
        None => None,
    };
    let path = {
        let guard = state.lock();
        let ds = guard.store.dataset();
        match ds.get(&id) {
            Some(r) => ds.image_path(r),
            None => return error(StatusCode::NOT_FOUND, format!("unknown item `{id}`")),
        }
    };
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return error(StatusCode::GONE, format!("image for `{id}` is missing"))
        }
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let (bytes, media) = match level {
        None => match MediaType::sniff(&bytes) {
            Some(m) => (bytes, m),
            None => {
                return error(
                    StatusCode::UNSUPPORTED_MEDIA_TYPE,
                    format!("image for `{id}` is not PNG or JPEG"),
                )
            }
        },
        Some(level) => {
            let rendition = tokio::task::spawn_blocking(move || {
                ImageInput::from_bytes(id, bytes).and_then(|img| resize(&img, level))
            })
            .await;
            match rendition {
                Ok(Ok(img)) => (img.bytes().to_vec(), img.media_type),
                Ok(Err(e)) => return error(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()),
                Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            }
        }
    };
    ([(header::CONTENT_TYPE, media.mime())], Body::from(bytes)).into_response()
}

async fn progress(State(state): State<AppState>) -> Json<Progress> {
    Json(state.lock().store.progress())
}
