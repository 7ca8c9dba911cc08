//! HTTP service for interactive steering runs.
//!
//! A served run executes on a background thread; whenever it needs feedback
//! it publishes the selected samples under `GET /runs/{id}/pending` and
//! blocks until a mask for each has been posted to `POST /runs/{id}/feedback`
//! (or the configured timeout passes, which pauses the run). Progress is
//! available as a server-sent event stream with replay and as a JSON report.
//!
//! Masks travel as [`RleMask`] run-length encodings (1 = irrelevant).

pub mod api;
pub mod rle;
pub mod session;

pub use api::{router, AppState, PendingEntry};
pub use rle::{decode, encode, RleError, RleMask};
pub use session::{
    spawn_run, AuditEntry, FeedbackSubmission, InteractiveFeedback, ReportView, RunSession, RunSummary, SubmitAck,
    SubmitError,
};

/// Serves `state` on `addr` until the process exits.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
