//! Explanation-alignment and fairness metrics.
//!
//! Masks follow the dataset convention: the relevance mask `A` is 1 on
//! irrelevant (background) pixels, and the ground truth for DICE is the
//! person mask `Y = 1 − A`. All exceedance tests are strict (`S > T`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Mask, Sample};
use crate::error::{Error, MetricError, Result};
use crate::explain::{bla_explain, gradcam, Method, SaliencyMap};
use crate::nn::Classifier;
use crate::trainer::argmax;

pub const DEFAULT_QUANTILE: f64 = 0.25;

/// Linear-interpolation quantile of `values` (`q ∈ [0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty slice");
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryExplanation {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl BinaryExplanation {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Threshold used for FFP/BFP: the `q`-quantile of a soft map, or 0 for a
/// hard (already binary) map.
pub fn threshold(s: &SaliencyMap, q: f64) -> f64 {
    if s.is_hard() {
        0.0
    } else {
        quantile(&s.values, q)
    }
}

/// `S > quantile_q(S)` per pixel.
pub fn binarize_saliency(s: &SaliencyMap, q: f64) -> BinaryExplanation {
    let t = quantile(&s.values, q);
    if s.values.iter().all(|&v| v == s.values[0]) {
        log::warn!("constant saliency map; binarized explanation is empty");
    }
    BinaryExplanation { height: s.height, width: s.width, values: s.values.iter().map(|&v| v > t).collect() }
}

/// Binarizes soft maps; hard maps pass through as `S > 0`.
pub fn explanation_mask(s: &SaliencyMap, q: f64) -> BinaryExplanation {
    if s.is_hard() {
        BinaryExplanation { height: s.height, width: s.width, values: s.values.iter().map(|&v| v > 0.0).collect() }
    } else {
        binarize_saliency(s, q)
    }
}

fn same_shape(h: usize, w: usize, m: &Mask) -> std::result::Result<(), MetricError> {
    if h == m.height() && w == m.width() {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch)
    }
}

/// `2|X ∩ Y| / (|X| + |Y|)`.
pub fn dice(x: &BinaryExplanation, y: &Mask) -> std::result::Result<f64, MetricError> {
    same_shape(x.height, x.width, y)?;
    let yx = y.data();
    let inter = x.values.iter().zip(yx).filter(|(&a, &b)| a && b == 1).count();
    let denom = x.count() + y.count_ones();
    if denom == 0 {
        return Err(MetricError::DegenerateDice);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// Fraction of pixels with `region(A_i)` whose saliency exceeds `t`.
fn exceedance(s: &SaliencyMap, a: &Mask, t: f64, bit: u8) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (&v, &m) in s.values.iter().zip(a.data()) {
        if m == bit {
            n += 1;
            hit += (v > t) as usize;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Foreground (A = 0) pixels with `S > T`, as a fraction of the foreground.
pub fn ffp(s: &SaliencyMap, a: &Mask, t: f64) -> std::result::Result<f64, MetricError> {
    same_shape(s.height, s.width, a)?;
    exceedance(s, a, t, 0).ok_or(MetricError::EmptyForeground)
}

/// Background (A = 1) pixels with `S > T`, as a fraction of the background.
pub fn bfp(s: &SaliencyMap, a: &Mask, t: f64) -> std::result::Result<f64, MetricError> {
    same_shape(s.height, s.width, a)?;
    exceedance(s, a, t, 1).ok_or(MetricError::EmptyBackground)
}

/// Share of total saliency mass on the background.
pub fn bsr(s: &SaliencyMap, a: &Mask) -> std::result::Result<f64, MetricError> {
    same_shape(s.height, s.width, a)?;
    let total: f64 = s.values.iter().sum();
    if total <= 0.0 {
        return Err(MetricError::ZeroSaliency);
    }
    let bg: f64 = s.values.iter().zip(a.data()).filter(|(_, &m)| m == 1).map(|(v, _)| v).sum();
    Ok(bg / total)
}

/// Share of all errors contributed by each true class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationShares {
    pub shares: Vec<f64>,
    pub errors: usize,
    /// Set when there were no errors; shares are then uniform.
    pub no_errors: bool,
}

impl MisclassificationShares {
    pub fn gap(&self) -> f64 {
        let max = self.shares.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.shares.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

pub fn misclassification_shares(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<MisclassificationShares> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Validation("predictions and labels must be equally long and non-empty".into()));
    }
    let mut per = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::Validation(format!("label {l} out of range")));
        }
        if p != l {
            per[l] += 1;
        }
    }
    let errors: usize = per.iter().sum();
    if errors == 0 {
        return Ok(MisclassificationShares { shares: vec![1.0 / num_classes as f64; num_classes], errors, no_errors: true });
    }
    Ok(MisclassificationShares {
        shares: per.iter().map(|&e| e as f64 / errors as f64).collect(),
        errors,
        no_errors: false,
    })
}

/// Metrics of one test sample; failed metrics carry the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub ffp: std::result::Result<f64, MetricError>,
    pub bfp: std::result::Result<f64, MetricError>,
    pub bsr: std::result::Result<f64, MetricError>,
    pub dice: std::result::Result<f64, MetricError>,
}

/// Computes the four alignment metrics for one map against `sample`'s
/// ground-truth masks.
pub fn sample_metrics(map: &SaliencyMap, sample: &Sample, predicted: usize, q: f64) -> SampleMetrics {
    let a = &sample.relevance_mask;
    let t = threshold(map, q);
    SampleMetrics {
        id: sample.id.clone(),
        label: sample.label,
        predicted,
        ffp: ffp(map, a, t),
        bfp: bfp(map, a, t),
        bsr: bsr(map, a),
        dice: dice(&explanation_mask(map, q), &sample.person_mask()),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub ffp: usize,
    pub bfp: usize,
    pub bsr: usize,
    pub dice: usize,
    /// Counts per failure kind across all metrics.
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub ffp: f64,
    pub bfp: f64,
    pub bsr: f64,
    pub dice: f64,
    /// Percentage of correct predictions.
    pub accuracy: f64,
    pub miscl: MisclassificationShares,
    pub n: usize,
    pub excluded: Excluded,
}

impl BiasReport {
    pub fn from_samples(samples: &[SampleMetrics], num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("cannot report on an empty test split".into()));
        }
        let mut excluded = Excluded::default();
        let mut mean = |pick: fn(&SampleMetrics) -> &std::result::Result<f64, MetricError>, slot: fn(&mut Excluded) -> &mut usize| {
            let (mut sum, mut n) = (0.0, 0usize);
            for s in samples {
                match pick(s) {
                    Ok(v) => {
                        sum += v;
                        n += 1;
                    }
                    Err(e) => {
                        *slot(&mut excluded) += 1;
                        let key = serde_json::to_value(e).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                        *excluded.reasons.entry(key).or_default() += 1;
                    }
                }
            }
            if n == 0 {
                f64::NAN
            } else {
                sum / n as f64
            }
        };
        let ffp = mean(|s| &s.ffp, |e| &mut e.ffp);
        let bfp = mean(|s| &s.bfp, |e| &mut e.bfp);
        let bsr = mean(|s| &s.bsr, |e| &mut e.bsr);
        let dice = mean(|s| &s.dice, |e| &mut e.dice);
        let preds: Vec<usize> = samples.iter().map(|s| s.predicted).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        Ok(Self {
            ffp,
            bfp,
            bsr,
            dice,
            accuracy: 100.0 * correct as f64 / samples.len() as f64,
            miscl: misclassification_shares(&preds, &labels, num_classes)?,
            n: samples.len(),
            excluded,
        })
    }
}

/// Explains each test image for its predicted class with `method` and
/// aggregates the metrics.
pub fn evaluate_samples(model: &Classifier, method: Method, test: &[&Sample], q: f64) -> Result<Vec<SampleMetrics>> {
    test.iter()
        .map(|s| {
            let probs = crate::trainer::predict_proba(model, &[&s.image])?.remove(0);
            let pred = argmax(&probs);
            let map = match method {
                Method::Gradcam => gradcam(model, &s.image, pred)?,
                Method::Bla => bla_explain(model, &s.image, pred)?,
            };
            Ok(sample_metrics(&map, s, pred, q))
        })
        .collect()
}

pub fn evaluate(model: &Classifier, method: Method, test: &[&Sample]) -> Result<BiasReport> {
    if test.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    BiasReport::from_samples(&evaluate_samples(model, method, test, DEFAULT_QUANTILE)?, model.num_classes())
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub sampling: String,
    pub xai: String,
    pub k: Option<usize>,
    pub report: BiasReport,
}

pub fn table_header(class_names: &[String; 2]) -> Vec<String> {
    let mut h: Vec<String> =
        ["strategy", "sampling", "xai", "k", "ffp", "bfp", "bsr", "dice", "acc"].iter().map(|s| s.to_string()).collect();
    h.extend(class_names.iter().map(|c| format!("miscl_{c}")));
    h
}

impl TableRow {
    pub fn record(&self) -> Vec<String> {
        let r = &self.report;
        let f = |v: f64| format!("{v:.4}");
        let mut out = vec![
            self.strategy.clone(),
            self.sampling.clone(),
            self.xai.clone(),
            self.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            f(r.ffp),
            f(r.bfp),
            f(r.bsr),
            f(r.dice),
            format!("{:.2}", r.accuracy),
        ];
        out.extend(r.miscl.shares.iter().map(|s| format!("{:.2}", 100.0 * s)));
        out
    }
}

/// Writes the table as CSV with one row per configuration.
pub fn write_table(path: &std::path::Path, class_names: &[String; 2], rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(table_header(class_names))?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
