use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use xil_core::data::{Image, Mask};
use xil_core::explain::{Method, SaliencyMap};
use xil_core::orchestrator::{FeedbackProvider, FeedbackRequest, PendingItem, Phase, ProgressEvent, ProgressSink};
use xil_core::Error;
use xil_service::{encode, router, AppState, InteractiveFeedback, RunSession};

fn item(id: &str) -> PendingItem {
    PendingItem {
        sample_id: id.into(),
        image: Image::filled(4, 6, 3, 0.5),
        saliency: SaliencyMap::new(4, 6, vec![0.5; 24], 1, Method::Gradcam).unwrap(),
        predicted: 1,
        confidence: 0.95,
        stored_mask: Mask::zeros(4, 6),
    }
}

fn request(n: usize) -> FeedbackRequest {
    FeedbackRequest { run_id: "r".into(), iteration: 0, items: (0..n).map(|i| item(&format!("s{i}"))).collect() }
}

fn session(timeout: Duration, dir: Option<std::path::PathBuf>) -> (AppState, Arc<RunSession>) {
    let s = RunSession::new("r", Method::Gradcam, ["cat".into(), "dog".into()], dir, timeout);
    let state = AppState::default();
    state.insert(s.clone());
    (state, s)
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_for_pending(state: &AppState, n: usize) -> Value {
    for _ in 0..200 {
        let (_, v) = call(state, "GET", "/runs/r/pending", None).await;
        if v.as_array().map_or(0, |a| a.len()) == n {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("pending list never reached {n} items");
}

fn submission(id: &str, mask: &Mask, who: &str) -> Value {
    json!({ "sample_id": id, "mask": encode(mask), "annotator": who, "timestamp": "2026-01-01T00:00:00Z" })
}

#[tokio::test]
async fn loop_resumes_only_after_every_sample_is_annotated() {
    let dir = tempfile::tempdir().unwrap();
    let (state, s) = session(Duration::from_secs(30), Some(dir.path().to_path_buf()));
    let mut provider = InteractiveFeedback(s.clone());
    let worker = std::thread::spawn(move || provider.collect(&request(5)));

    let pending = wait_for_pending(&state, 5).await;
    assert_eq!(pending[0]["explainer"], "gradcam");
    assert_eq!(pending[0]["predicted_label"], "dog");
    assert!(!pending[0]["overlay"].as_str().unwrap().is_empty());

    let bg = Mask::from_fn(4, 6, |y, _| y < 2);
    for i in 0..4 {
        let (code, ack) = call(&state, "POST", "/runs/r/feedback", Some(submission(&format!("s{i}"), &bg, "ann"))).await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(ack["remaining"], 4 - i);
    }
    assert!(!worker.is_finished());
    assert_eq!(s.phase(), Some(Phase::AwaitingFeedback));

    // duplicate: last write wins
    let (_, ack) = call(&state, "POST", "/runs/r/feedback", Some(submission("s0", &Mask::zeros(4, 6), "ann2"))).await;
    assert_eq!(ack["replaced"], true);
    let (code, _) = call(&state, "POST", "/runs/r/feedback", Some(submission("s4", &Mask::zeros(4, 6), "ann"))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(s.phase(), Some(Phase::Training));

    let fb = worker.join().unwrap().unwrap();
    assert_eq!(fb.len(), 5);
    assert_eq!(fb[0].mask, Mask::zeros(4, 6));
    assert_eq!(fb[0].provenance, "human:ann2");
    assert_eq!(fb[1].mask, bg);
    assert_eq!(fb[1].provenance, "human:ann");
    let actions: Vec<_> = s.audit().iter().map(|a| a.action).collect();
    assert_eq!(actions.iter().filter(|a| **a == "replace").count(), 1);
    let audit = std::fs::read_to_string(dir.path().join("feedback_audit.csv")).unwrap();
    assert_eq!(audit.lines().count(), 7);

    let (_, after) = call(&state, "GET", "/runs/r/pending", None).await;
    assert_eq!(after, json!([]));
}

#[tokio::test]
async fn submissions_are_validated() {
    let (state, s) = session(Duration::from_secs(30), None);
    let (code, _) = call(&state, "POST", "/runs/r/feedback", Some(submission("s0", &Mask::zeros(4, 6), "a"))).await;
    assert_eq!(code, StatusCode::CONFLICT, "not awaiting feedback");

    let mut provider = InteractiveFeedback(s.clone());
    let worker = std::thread::spawn(move || provider.collect(&request(1)));
    wait_for_pending(&state, 1).await;
    let (code, _) = call(&state, "POST", "/runs/r/feedback", Some(submission("zz", &Mask::zeros(4, 6), "a"))).await;
    assert_eq!(code, StatusCode::CONFLICT, "non-pending sample");
    let (code, body) = call(&state, "POST", "/runs/r/feedback", Some(submission("s0", &Mask::zeros(6, 4), "a"))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let bad = json!({ "sample_id": "s0", "mask": { "height": 4, "width": 6, "counts": [3] }, "annotator": "a" });
    let (code, _) = call(&state, "POST", "/runs/r/feedback", Some(bad)).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = call(&state, "POST", "/runs/nope/feedback", Some(submission("s0", &Mask::zeros(4, 6), "a"))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    // all-zero masks are accepted
    let (code, _) = call(&state, "POST", "/runs/r/feedback", Some(submission("s0", &Mask::zeros(4, 6), "a"))).await;
    assert_eq!(code, StatusCode::OK);
    assert!(worker.join().unwrap().is_ok());
}

#[tokio::test]
async fn missing_feedback_times_out_as_a_feedback_error() {
    let (state, s) = session(Duration::from_millis(50), None);
    let mut provider = InteractiveFeedback(s.clone());
    let err = tokio::task::spawn_blocking(move || provider.collect(&request(2))).await.unwrap().unwrap_err();
    assert!(matches!(err, Error::Feedback(_)));
    let (_, pending) = call(&state, "GET", "/runs/r/pending", None).await;
    assert_eq!(pending, json!([]));
}

async fn sse_events(state: &AppState, uri: &str) -> Vec<(String, Value)> {
    let req = Request::builder().uri(uri).body(Body::empty()).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    text.split("\n\n")
        .filter_map(|block| {
            let ev = block.lines().find_map(|l| l.strip_prefix("event: "))?;
            let data = block.lines().find_map(|l| l.strip_prefix("data: "))?;
            Some((ev.to_string(), serde_json::from_str(data).unwrap()))
        })
        .collect()
}

#[tokio::test]
async fn event_stream_replays_history_and_closes_when_done() {
    let (state, s) = session(Duration::from_secs(1), None);
    let ev = |iteration, phase| ProgressEvent { run_id: "r".into(), iteration, phase, report: None, delta: None, message: None };
    s.emit(ev(None, Phase::Baseline));
    for i in 0..3 {
        s.emit(ev(Some(i), Phase::Training));
        s.emit(ev(Some(i), Phase::IterationComplete));
    }
    // a live subscriber sees the completion event and the stream ends
    let live = {
        let state = state.clone();
        tokio::spawn(async move { sse_events(&state, "/runs/r/events").await })
    };
    tokio::time::sleep(Duration::from_millis(50)).await;
    s.emit(ev(None, Phase::Completed));
    let events = live.await.unwrap();
    assert_eq!(events.len(), 8);
    assert_eq!(events.last().unwrap().1["phase"], "completed");

    // reconnecting afterwards replays everything
    let replay = sse_events(&state, "/runs/r/events").await;
    assert_eq!(replay, events);
    let iters: Vec<u64> = replay.iter().filter(|(_, v)| v["phase"] == "iteration_complete").map(|(_, v)| v["iteration"].as_u64().unwrap()).collect();
    assert_eq!(iters, vec![0, 1, 2]);

    let unknown = sse_events(&state, "/runs/nope/events").await;
    assert_eq!(unknown.len(), 1);
    assert_eq!(unknown[0].0, "error");
}

#[tokio::test]
async fn unknown_runs_are_not_found() {
    let (state, _) = session(Duration::from_secs(1), None);
    assert_eq!(call(&state, "GET", "/runs/nope/pending", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "GET", "/runs/nope/report", None).await.0, StatusCode::NOT_FOUND);
    let (code, runs) = call(&state, "GET", "/runs", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(runs[0]["run_id"], "r");
}
