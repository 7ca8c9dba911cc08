use std::collections::BTreeMap;
use std::convert::Infallible;
use std::io::Cursor;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::stream::{self, Stream, StreamExt};
use serde::Serialize;
use serde_json::json;
use tokio::sync::broadcast;
use xil_core::data::image_to_rgb;
use xil_core::explain::render_overlay;
use xil_core::orchestrator::{PendingItem, Phase, ProgressEvent};

use crate::session::{FeedbackSubmission, ReportView, RunSession, RunSummary, SubmitAck, SubmitError};

/// Registry of served runs, keyed by run id.
#[derive(Clone, Default)]
pub struct AppState {
    runs: Arc<RwLock<BTreeMap<String, Arc<RunSession>>>>,
}

impl AppState {
    pub fn insert(&self, session: Arc<RunSession>) {
        self.runs.write().unwrap_or_else(|p| p.into_inner()).insert(session.run_id.clone(), session);
    }

    pub fn get(&self, run_id: &str) -> Option<Arc<RunSession>> {
        self.runs.read().unwrap_or_else(|p| p.into_inner()).get(run_id).cloned()
    }

    fn all(&self) -> Vec<Arc<RunSession>> {
        self.runs.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}/pending", get(get_pending))
        .route("/runs/{id}/feedback", post(post_feedback))
        .route("/runs/{id}/events", get(stream_events))
        .route("/runs/{id}/report", get(get_report))
        .with_state(state)
}

pub enum ApiError {
    UnknownRun(String),
    Submit(SubmitError),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ApiError::UnknownRun(id) => (StatusCode::NOT_FOUND, format!("unknown run `{id}`")),
            ApiError::Submit(e @ SubmitError::Invalid(_)) => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            ApiError::Submit(e) => (StatusCode::CONFLICT, e.to_string()),
        };
        (code, Json(json!({ "error": msg }))).into_response()
    }
}

fn session(state: &AppState, id: &str) -> Result<Arc<RunSession>, ApiError> {
    state.get(id).ok_or_else(|| ApiError::UnknownRun(id.to_string()))
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunSummary>> {
    Json(state.all().iter().map(|s| s.summary()).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct PendingEntry {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    /// Base64 PNG of the input image.
    pub image: String,
    /// Base64 PNG of the saliency heatmap blended over the image.
    pub overlay: String,
    pub explainer: String,
    pub predicted: usize,
    pub predicted_label: String,
    pub confidence: f64,
    pub annotated: bool,
}

fn png_base64(img: &image::RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encoding");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

fn pending_entry(session: &RunSession, item: &PendingItem, annotated: bool) -> PendingEntry {
    let overlay = match render_overlay(&item.image, &item.saliency, 0.5) {
        Ok(img) => png_base64(&img),
        Err(e) => {
            log::warn!("{}: overlay failed: {e}", item.sample_id);
            String::new()
        }
    };
    PendingEntry {
        sample_id: item.sample_id.clone(),
        height: item.image.height(),
        width: item.image.width(),
        image: png_base64(&image_to_rgb(&item.image)),
        overlay,
        explainer: item.saliency.method.as_str().to_string(),
        predicted: item.predicted,
        predicted_label: session.class_names.get(item.predicted).cloned().unwrap_or_default(),
        confidence: item.confidence,
        annotated,
    }
}

async fn get_pending(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<PendingEntry>>, ApiError> {
    let s = session(&state, &id)?;
    let items = s.pending();
    Ok(Json(items.iter().map(|(it, done)| pending_entry(&s, it, *done)).collect()))
}

async fn post_feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(sub): Json<FeedbackSubmission>,
) -> Result<Json<SubmitAck>, ApiError> {
    let s = session(&state, &id)?;
    s.submit(sub).map(Json).map_err(ApiError::Submit)
}

async fn get_report(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ReportView>, ApiError> {
    Ok(Json(session(&state, &id)?.report()))
}

fn progress_event(e: &ProgressEvent) -> Event {
    Event::default().event("progress").json_data(e).unwrap_or_else(|_| Event::default().event("progress"))
}

fn ends_stream(e: &ProgressEvent) -> bool {
    matches!(e.phase, Phase::Completed | Phase::Paused | Phase::Failed)
}

async fn stream_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream: std::pin::Pin<Box<dyn Stream<Item = Result<Event, Infallible>> + Send>> = match state.get(&id) {
        None => {
            let e = Event::default().event("error").data(json!({ "error": format!("unknown run `{id}`") }).to_string());
            Box::pin(stream::once(async move { Ok(e) }))
        }
        Some(s) => {
            let (history, rx) = s.subscribe();
            let done = history.iter().any(ends_stream);
            let replay = stream::iter(history.iter().map(progress_event).map(Ok).collect::<Vec<_>>());
            match rx {
                Some(rx) if !done => Box::pin(replay.chain(live(rx))),
                _ => Box::pin(replay),
            }
        }
    };
    Sse::new(stream).keep_alive(KeepAlive::default())
}

/// Forwards broadcast events until the run reaches a terminal phase.
fn live(rx: broadcast::Receiver<ProgressEvent>) -> impl Stream<Item = Result<Event, Infallible>> + Send {
    stream::unfold(Some(rx), |rx| async move {
        let mut rx = rx?;
        loop {
            match rx.recv().await {
                Ok(e) => {
                    let next = if ends_stream(&e) { None } else { Some(rx) };
                    return Some((Ok(progress_event(&e)), next));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("event stream lagged by {n}"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}
