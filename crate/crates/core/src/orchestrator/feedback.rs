use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_mask_png, write_mask_png, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::explain::SaliencyMap;
use crate::metrics::BiasReport;

/// A sample awaiting a relevance annotation.
#[derive(Clone, Debug)]
pub struct PendingItem {
    pub sample_id: String,
    pub image: Image,
    pub saliency: SaliencyMap,
    pub predicted: usize,
    pub confidence: f64,
    /// Stored ground-truth mask, used by the oracle.
    pub stored_mask: Mask,
}

#[derive(Clone, Debug)]
pub struct FeedbackRequest {
    pub run_id: String,
    pub iteration: usize,
    pub items: Vec<PendingItem>,
}

/// One relevance mask (1 = irrelevant) for a pending sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Feedback {
    pub sample_id: String,
    pub mask: Mask,
    /// `"oracle"` or `"human:<annotator>"`.
    pub provenance: String,
}

/// Supplies feedback masks for every item of a request.
pub trait FeedbackProvider: Send {
    fn collect(&mut self, request: &FeedbackRequest) -> Result<Vec<Feedback>>;
}

/// Ground-truth masks stand in for a user.
pub fn simulate_feedback(sample: &Sample) -> Feedback {
    Feedback { sample_id: sample.id.clone(), mask: sample.relevance_mask.clone(), provenance: "oracle".into() }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OracleFeedback;

impl FeedbackProvider for OracleFeedback {
    fn collect(&mut self, request: &FeedbackRequest) -> Result<Vec<Feedback>> {
        Ok(request
            .items
            .iter()
            .map(|it| Feedback { sample_id: it.sample_id.clone(), mask: it.stored_mask.clone(), provenance: "oracle".into() })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Scoring,
    AwaitingFeedback,
    Training,
    Evaluating,
    IterationComplete,
    Completed,
    Paused,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub ffp: f64,
    pub bfp: f64,
    pub bsr: f64,
    pub dice: f64,
    pub accuracy: f64,
}

impl ReportDelta {
    pub fn between(before: &BiasReport, after: &BiasReport) -> Self {
        Self {
            ffp: after.ffp - before.ffp,
            bfp: after.bfp - before.bfp,
            bsr: after.bsr - before.bsr,
            dice: after.dice - before.dice,
            accuracy: after.accuracy - before.accuracy,
        }
    }
}

/// Progress notification; iteration `None` refers to the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub run_id: String,
    pub iteration: Option<usize>,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<BiasReport>,
    /// Change against the baseline report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<ReportDelta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub trait ProgressSink: Send + Sync {
    fn emit(&self, event: ProgressEvent);
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoProgress;

impl ProgressSink for NoProgress {
    fn emit(&self, _: ProgressEvent) {}
}

/// Stored feedback masks under `<run>/feedback/iter<i>/`, with a
/// `feedback.csv` (`iteration,sample_id,provenance`) log at the run root.
pub struct FeedbackStore {
    root: PathBuf,
}

impl FeedbackStore {
    pub fn new(run_dir: &Path) -> Self {
        Self { root: run_dir.to_path_buf() }
    }

    fn dir(&self, iteration: usize) -> PathBuf {
        self.root.join("feedback").join(format!("iter{iteration}"))
    }

    pub fn mask_path(&self, iteration: usize, sample_id: &str) -> PathBuf {
        self.dir(iteration).join(format!("{sample_id}.png"))
    }

    /// Writes masks (255 = irrelevant) and appends provenance lines.
    pub fn save(&self, iteration: usize, feedback: &[Feedback]) -> Result<()> {
        let dir = self.dir(iteration);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log = self.root.join("feedback.csv");
        let fresh = !log.exists();
        let mut text = String::new();
        if fresh {
            text.push_str("iteration,sample_id,provenance\n");
        }
        for f in feedback {
            write_mask_png(&f.mask, &self.mask_path(iteration, &f.sample_id))?;
            text.push_str(&format!("{iteration},{},{}\n", f.sample_id, f.provenance));
        }
        use std::io::Write;
        let mut file = fs::OpenOptions::new().create(true).append(true).open(&log).map_err(|e| Error::io(&log, e))?;
        file.write_all(text.as_bytes()).map_err(|e| Error::io(&log, e))
    }

    /// Previously stored feedback for `iteration`, when every id has a mask.
    pub fn load(&self, iteration: usize, ids: &[String]) -> Result<Option<Vec<Feedback>>> {
        let log = self.root.join("feedback.csv");
        if !log.exists() {
            return Ok(None);
        }
        let mut rdr = csv::Reader::from_path(&log)?;
        let mut provenance = std::collections::BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            if row.get(0).and_then(|s| s.parse::<usize>().ok()) == Some(iteration) {
                provenance.insert(row[1].to_string(), row[2].to_string());
            }
        }
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let path = self.mask_path(iteration, id);
            let (Some(p), true) = (provenance.get(id), path.exists()) else {
                return Ok(None);
            };
            let img = read_mask_png(&path)?;
            let mask = Mask::from_fn(img.height() as usize, img.width() as usize, |y, x| {
                img.get_pixel(x as u32, y as u32)[0] > 0
            });
            out.push(Feedback { sample_id: id.clone(), mask, provenance: p.clone() });
        }
        Ok(Some(out))
    }
}
