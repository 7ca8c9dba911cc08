use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use tokio::sync::broadcast;
use xil_core::data::{Dataset, Mask};
use xil_core::explain::Method;
use xil_core::metrics::BiasReport;
use xil_core::orchestrator::{
    run_experiment, ExperimentConfig, ExperimentRecord, Feedback, FeedbackProvider, FeedbackRequest, PendingItem, Phase,
    ProgressEvent, ProgressSink, ReportDelta, RunEnv, RunStatus,
};

use crate::rle::{decode, RleMask};

/// A human annotation as posted by the client.
#[derive(Clone, Debug, serde::Deserialize, Serialize)]
pub struct FeedbackSubmission {
    pub sample_id: String,
    pub mask: RleMask,
    pub annotator: String,
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SubmitAck {
    pub sample_id: String,
    /// A previous submission for the same sample was overwritten.
    pub replaced: bool,
    /// Pending samples still lacking a mask.
    pub remaining: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SubmitError {
    #[error("run is not awaiting feedback")]
    NotAwaiting,
    #[error("sample `{0}` is not pending")]
    NotPending(String),
    #[error("invalid mask: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AuditEntry {
    pub iteration: usize,
    pub sample_id: String,
    pub annotator: String,
    pub timestamp: Option<String>,
    pub action: &'static str,
}

struct Pending {
    iteration: usize,
    items: Vec<PendingItem>,
    submitted: BTreeMap<String, Feedback>,
}

struct Inner {
    phase: Option<Phase>,
    iteration: Option<usize>,
    pending: Option<Pending>,
    events: Vec<ProgressEvent>,
    finished: bool,
    status: Option<RunStatus>,
    audit: Vec<AuditEntry>,
}

/// State of one served run, shared between the HTTP handlers and the
/// training thread.
pub struct RunSession {
    pub run_id: String,
    pub explainer: Method,
    pub class_names: [String; 2],
    pub run_dir: Option<PathBuf>,
    timeout: Duration,
    inner: Mutex<Inner>,
    ready: Condvar,
    tx: broadcast::Sender<ProgressEvent>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub phase: Option<Phase>,
    pub iteration: Option<usize>,
    pub status: Option<RunStatus>,
    pub explainer: Method,
    pub pending: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub report: BiasReport,
    pub delta: Option<ReportDelta>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportView {
    pub run_id: String,
    pub phase: Option<Phase>,
    pub status: Option<RunStatus>,
    pub baseline: Option<BiasReport>,
    pub iterations: Vec<IterationReport>,
    pub latest: Option<BiasReport>,
}

fn terminal(phase: Phase) -> bool {
    matches!(phase, Phase::Completed | Phase::Paused | Phase::Failed)
}

impl RunSession {
    pub fn new(
        run_id: impl Into<String>,
        explainer: Method,
        class_names: [String; 2],
        run_dir: Option<PathBuf>,
        timeout: Duration,
    ) -> Arc<Self> {
        let (tx, _) = broadcast::channel(1024);
        Arc::new(Self {
            run_id: run_id.into(),
            explainer,
            class_names,
            run_dir,
            timeout,
            inner: Mutex::new(Inner {
                phase: None,
                iteration: None,
                pending: None,
                events: Vec::new(),
                finished: false,
                status: None,
                audit: Vec::new(),
            }),
            ready: Condvar::new(),
            tx,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn summary(&self) -> RunSummary {
        let g = self.lock();
        RunSummary {
            run_id: self.run_id.clone(),
            phase: g.phase,
            iteration: g.iteration,
            status: g.status,
            explainer: self.explainer,
            pending: g.pending.as_ref().map_or(0, |p| p.items.len() - p.submitted.len()),
        }
    }

    pub fn phase(&self) -> Option<Phase> {
        self.lock().phase
    }

    /// Items of the current feedback request with an `annotated` flag; empty
    /// unless the run is waiting for feedback.
    pub fn pending(&self) -> Vec<(PendingItem, bool)> {
        let g = self.lock();
        match &g.pending {
            Some(p) => p.items.iter().map(|it| (it.clone(), p.submitted.contains_key(&it.sample_id))).collect(),
            None => Vec::new(),
        }
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.lock().audit.clone()
    }

    pub fn submit(&self, sub: FeedbackSubmission) -> Result<SubmitAck, SubmitError> {
        let mut g = self.lock();
        let inner = &mut *g;
        let pending = inner.pending.as_mut().ok_or(SubmitError::NotAwaiting)?;
        let item = pending
            .items
            .iter()
            .find(|it| it.sample_id == sub.sample_id)
            .ok_or_else(|| SubmitError::NotPending(sub.sample_id.clone()))?;
        let mask: Mask = decode(&sub.mask).map_err(|e| SubmitError::Invalid(e.to_string()))?;
        if mask.height() != item.image.height() || mask.width() != item.image.width() {
            return Err(SubmitError::Invalid(format!(
                "mask is {}x{}, image is {}x{}",
                mask.height(),
                mask.width(),
                item.image.height(),
                item.image.width()
            )));
        }
        let annotator = if sub.annotator.trim().is_empty() { "anonymous".to_string() } else { sub.annotator.clone() };
        let fb = Feedback { sample_id: sub.sample_id.clone(), mask, provenance: format!("human:{annotator}") };
        let replaced = pending.submitted.insert(sub.sample_id.clone(), fb).is_some();
        let entry = AuditEntry {
            iteration: pending.iteration,
            sample_id: sub.sample_id.clone(),
            annotator,
            timestamp: sub.timestamp.clone(),
            action: if replaced { "replace" } else { "submit" },
        };
        let remaining = pending.items.len() - pending.submitted.len();
        if remaining == 0 {
            inner.phase = Some(Phase::Training);
            self.ready.notify_all();
        }
        self.write_audit(&entry);
        inner.audit.push(entry);
        Ok(SubmitAck { sample_id: sub.sample_id, replaced, remaining })
    }

    fn write_audit(&self, e: &AuditEntry) {
        let Some(dir) = &self.run_dir else { return };
        let path = dir.join("feedback_audit.csv");
        let fresh = !path.exists();
        let line = format!(
            "{}{},{},{},{},{}\n",
            if fresh { "iteration,sample_id,annotator,timestamp,action\n" } else { "" },
            e.iteration,
            e.sample_id,
            e.annotator.replace(',', " "),
            e.timestamp.as_deref().unwrap_or("").replace(',', " "),
            e.action
        );
        let res = fs::create_dir_all(dir)
            .and_then(|_| fs::OpenOptions::new().create(true).append(true).open(&path))
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(err) = res {
            log::warn!("{}: {err}", path.display());
        }
    }

    /// Blocks until every item of `request` has a submission or the timeout
    /// passes.
    fn await_feedback(&self, request: &FeedbackRequest) -> xil_core::Result<Vec<Feedback>> {
        let mut g = self.lock();
        g.pending = Some(Pending { iteration: request.iteration, items: request.items.clone(), submitted: BTreeMap::new() });
        g.phase = Some(Phase::AwaitingFeedback);
        let (mut g, _) = self
            .ready
            .wait_timeout_while(g, self.timeout, |inner| {
                inner.pending.as_ref().is_some_and(|p| p.submitted.len() < p.items.len())
            })
            .unwrap_or_else(|p| p.into_inner());
        let mut pending = g.pending.take().expect("only the waiting thread clears the request");
        if pending.submitted.len() < pending.items.len() {
            let missing = pending.items.len() - pending.submitted.len();
            return Err(xil_core::Error::Feedback(format!(
                "timed out after {}s with {missing} of {} masks missing",
                self.timeout.as_secs(),
                pending.items.len()
            )));
        }
        Ok(request.items.iter().map(|it| pending.submitted.remove(&it.sample_id).expect("complete")).collect())
    }

    /// Events so far and, unless the run has ended, a receiver for the rest.
    pub fn subscribe(&self) -> (Vec<ProgressEvent>, Option<broadcast::Receiver<ProgressEvent>>) {
        let g = self.lock();
        let rx = (!g.finished).then(|| self.tx.subscribe());
        (g.events.clone(), rx)
    }

    pub fn report(&self) -> ReportView {
        let g = self.lock();
        let mut view = ReportView {
            run_id: self.run_id.clone(),
            phase: g.phase,
            status: g.status,
            baseline: None,
            iterations: Vec::new(),
            latest: None,
        };
        for e in &g.events {
            match (e.phase, e.iteration, &e.report) {
                (Phase::Baseline, _, Some(r)) => {
                    view.baseline = Some(r.clone());
                    view.latest = Some(r.clone());
                }
                (Phase::IterationComplete, Some(i), Some(r)) => {
                    view.iterations.push(IterationReport { iteration: i, report: r.clone(), delta: e.delta.clone() });
                    view.latest = Some(r.clone());
                }
                _ => {}
            }
        }
        view
    }

    /// Marks the run as ended, e.g. after its thread returned.
    pub fn finish(&self, status: RunStatus) {
        let mut g = self.lock();
        g.status = Some(status);
        g.finished = true;
        g.pending = None;
    }
}

impl ProgressSink for RunSession {
    fn emit(&self, event: ProgressEvent) {
        let mut g = self.lock();
        if event.iteration.is_some() {
            g.iteration = event.iteration;
        }
        g.phase = Some(event.phase);
        if terminal(event.phase) {
            g.finished = true;
            g.status = Some(match event.phase {
                Phase::Completed => RunStatus::Completed,
                Phase::Paused => RunStatus::Paused,
                _ => RunStatus::Failed,
            });
        }
        g.events.push(event.clone());
        // no receivers is fine
        let _ = self.tx.send(event);
    }
}

/// Feedback provider that hands requests to the served session and waits
/// for human masks.
pub struct InteractiveFeedback(pub Arc<RunSession>);

impl FeedbackProvider for InteractiveFeedback {
    fn collect(&mut self, request: &FeedbackRequest) -> xil_core::Result<Vec<Feedback>> {
        self.0.await_feedback(request)
    }
}

/// Runs `cfg` on a background thread with interactive feedback routed
/// through `session`.
pub fn spawn_run(
    session: Arc<RunSession>,
    cfg: ExperimentConfig,
    data: Dataset,
) -> JoinHandle<xil_core::Result<ExperimentRecord>> {
    std::thread::spawn(move || {
        let mut provider = InteractiveFeedback(session.clone());
        let mut env = RunEnv {
            run_dir: session.run_dir.clone(),
            data_spec: Some(cfg.data.clone()),
            feedback: &mut provider,
            progress: session.as_ref(),
        };
        let out = run_experiment(&cfg.steering, &data, &mut env);
        let status = match &out {
            Ok(r) => r.status,
            Err(xil_core::Error::Feedback(_)) => RunStatus::Paused,
            Err(_) => RunStatus::Failed,
        };
        session.finish(status);
        out
    })
}
