//! Choosing which pool samples to show the user each iteration.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Uncertainty,
    HighConfidence,
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Uncertainty => "uncertainty",
            Sampler::HighConfidence => "high_confidence",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolPrediction {
    pub sample_id: String,
    pub probabilities: Vec<f64>,
    pub true_label: usize,
}

impl PoolPrediction {
    pub fn new(sample_id: impl Into<String>, probabilities: Vec<f64>, true_label: usize) -> Result<Self> {
        let sum: f64 = probabilities.iter().sum();
        if probabilities.len() < 2 || (sum - 1.0).abs() > 1e-6 || probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("probabilities must form a distribution over >= 2 classes".into()));
        }
        Ok(Self { sample_id: sample_id.into(), probabilities, true_label })
    }

    /// Largest and second-largest probability.
    fn top2(&self) -> (f64, f64) {
        let mut s = self.probabilities.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    }

    pub fn top1(&self) -> f64 {
        self.top2().0
    }

    pub fn margin(&self) -> f64 {
        let (a, b) = self.top2();
        a - b
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probabilities)
    }
}

fn nonempty(pool: &[PoolPrediction]) -> Result<()> {
    if pool.is_empty() {
        Err(Error::Selection("sample pool is empty".into()))
    } else {
        Ok(())
    }
}

/// The `n` samples with the smallest top-1/top-2 margin (ascending id on ties).
pub fn uncertainty_sample(pool: &[PoolPrediction], n: usize) -> Result<Vec<String>> {
    nonempty(pool)?;
    if n > pool.len() {
        return Err(Error::Selection(format!("requested {n} samples from a pool of {}", pool.len())));
    }
    let mut ranked: Vec<(f64, &str)> = pool.iter().map(|p| (p.margin(), p.sample_id.as_str())).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().take(n).map(|(_, id)| id.to_string()).collect())
}

/// Up to `n` correctly classified samples whose top-1 probability exceeds
/// `threshold`, most confident first (ascending id on ties).
pub fn high_confidence_sample(pool: &[PoolPrediction], n: usize, threshold: f64) -> Result<Vec<String>> {
    nonempty(pool)?;
    if !(threshold > 0.5 && threshold < 1.0) {
        return Err(Error::Config(format!("confidence threshold must lie in (0.5, 1), got {threshold}")));
    }
    let mut ranked: Vec<(f64, &str)> = pool
        .iter()
        .filter(|p| p.predicted() == p.true_label && p.top1() > threshold)
        .map(|p| (p.top1(), p.sample_id.as_str()))
        .collect();
    if ranked.is_empty() {
        log::warn!("no correct predictions above confidence {threshold}");
    }
    ranked.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.cmp(b.1),
        o => o,
    });
    Ok(ranked.into_iter().take(n).map(|(_, id)| id.to_string()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub iteration: usize,
    pub strategy: Sampler,
    pub sample_id: String,
    pub top1: f64,
    pub margin: f64,
}

impl SelectionRecord {
    pub fn from_prediction(iteration: usize, strategy: Sampler, p: &PoolPrediction) -> Self {
        Self { iteration, strategy, sample_id: p.sample_id.clone(), top1: p.top1(), margin: p.margin() }
    }
}

/// Appends `iteration,strategy,sample_id,top1,margin` rows.
pub fn append_selection_log(path: &Path, rows: &[SelectionRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str("iteration,strategy,sample_id,top1,margin\n");
    }
    for r in rows {
        buf.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.strategy.as_str(), r.sample_id, r.top1, r.margin));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(id: &str, p0: f64, label: usize) -> PoolPrediction {
        PoolPrediction::new(id, vec![p0, 1.0 - p0], label).unwrap()
    }

    #[test]
    fn smallest_margin_first() {
        let pool = vec![pred("A", 0.51, 0), pred("B", 0.9, 0), pred("C", 0.6, 0)];
        assert_eq!(uncertainty_sample(&pool, 1).unwrap(), ["A"]);
        assert_eq!(uncertainty_sample(&pool, 3).unwrap(), ["A", "C", "B"]);
    }

    #[test]
    fn equal_margins_break_by_id() {
        let pool = vec![pred("b", 0.55, 0), pred("a", 0.45, 1)];
        assert_eq!(uncertainty_sample(&pool, 1).unwrap(), ["a"]);
    }

    #[test]
    fn empty_pool_and_oversized_request_are_selection_errors() {
        assert!(matches!(uncertainty_sample(&[], 1), Err(Error::Selection(_))));
        assert!(matches!(high_confidence_sample(&[], 1, 0.9), Err(Error::Selection(_))));
        assert!(matches!(uncertainty_sample(&[pred("a", 0.5, 0)], 2), Err(Error::Selection(_))));
    }

    #[test]
    fn high_confidence_filters_wrong_and_unsure() {
        let pool = vec![pred("A", 0.95, 0), pred("B", 0.85, 0), pred("C", 0.01, 0)];
        assert_eq!(high_confidence_sample(&pool, 2, 0.9).unwrap(), ["A"]);
        let wrong = vec![pred("A", 0.95, 1), pred("B", 0.02, 0)];
        assert!(high_confidence_sample(&wrong, 2, 0.9).unwrap().is_empty());
        let c = vec![pred("x", 0.91, 0), pred("y", 0.95, 0), pred("z", 0.93, 0)];
        assert_eq!(high_confidence_sample(&c, 2, 0.9).unwrap(), ["y", "z"]);
        assert!(matches!(high_confidence_sample(&c, 2, 0.4), Err(Error::Config(_))));
    }

    #[test]
    fn selection_log_has_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.csv");
        let r = SelectionRecord::from_prediction(0, Sampler::Uncertainty, &pred("a", 0.6, 0));
        append_selection_log(&path, &[r.clone()]).unwrap();
        append_selection_log(&path, &[r]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("iteration")).count(), 1);
        assert_eq!(text.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn high_confidence_picks_have_wide_margins(ps in prop::collection::vec((0.0f64..1.0, 0usize..2), 1..40), n in 1usize..10) {
            let pool: Vec<_> = ps.iter().enumerate().map(|(i, &(p, l))| pred(&format!("s{i:02}"), p, l)).collect();
            let threshold = 0.9;
            for id in high_confidence_sample(&pool, n, threshold).unwrap() {
                let p = pool.iter().find(|p| p.sample_id == id).unwrap();
                prop_assert!(p.margin() > 2.0 * threshold - 1.0 - 1e-12);
            }
            let n = n.min(pool.len());
            let a = uncertainty_sample(&pool, n).unwrap();
            prop_assert_eq!(&a, &uncertainty_sample(&pool, n).unwrap());
            let cutoff = pool.iter().filter(|p| a.contains(&p.sample_id)).map(|p| p.margin()).fold(0.0, f64::max);
            prop_assert!(pool.iter().filter(|p| !a.contains(&p.sample_id)).all(|p| p.margin() >= cutoff));
        }
    }
}
