//! Training loop, inference helpers and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_seed, log_prob_sum_seed, Architecture, Classifier, GradRequest, ParamScope};

/// One training example. `mask` carries user feedback (1 = irrelevant) and
/// is only consulted by explanation-aware objectives.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub label: usize,
    pub mask: Option<&'a Mask>,
}

impl<'a> TrainItem<'a> {
    pub fn plain(sample: &'a Sample) -> Self {
        Self { id: &sample.id, image: &sample.image, label: sample.label, mask: None }
    }

    pub fn with_mask(sample: &'a Sample, mask: &'a Mask) -> Self {
        Self { id: &sample.id, image: &sample.image, label: sample.label, mask: Some(mask) }
    }
}

/// Which parameters an optimisation run may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    All,
    /// Logit head plus attention module.
    Head,
    /// Attention module only.
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            trainable: Trainable::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Summed loss components over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub right_reasons: f64,
    pub regularization: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.right_reasons + self.regularization
    }

    pub fn merge(&mut self, o: &LossBreakdown) {
        self.cross_entropy += o.cross_entropy;
        self.right_reasons += o.right_reasons;
        self.regularization += o.regularization;
        self.correct += o.correct;
        self.count += o.count;
    }
}

/// A differentiable training objective.
pub trait Objective {
    fn name(&self) -> &'static str;

    /// Returns the loss over `batch` and adds `∂loss/∂θ` into `grad`
    /// (restricted to `scope`).
    fn evaluate(&self, model: &Classifier, batch: &[TrainItem], scope: ParamScope, grad: &mut [f64])
        -> Result<LossBreakdown>;
}

/// Summed cross-entropy `Σ_n -log ŷ_{n,y_n}` with probabilities clamped at 1e-12.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn evaluate(&self, model: &Classifier, batch: &[TrainItem], scope: ParamScope, grad: &mut [f64])
        -> Result<LossBreakdown> {
        let mut out = LossBreakdown::default();
        for item in batch {
            model.check_input(item.image.data().len())?;
            let tape = model.forward(item.image.to_f64());
            let (ce, seed) = cross_entropy_seed(&tape.log_probs(), item.label);
            if scope != ParamScope::None {
                let req = GradRequest { params: scope, input: false, features: false };
                model.backward(&tape, &seed, req, Some(grad));
            }
            out.cross_entropy += ce;
            out.correct += (argmax(&tape.probs()) == item.label) as usize;
            out.count += 1;
        }
        Ok(out)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam over a flat parameter vector, updating only `[start, end)` ranges.
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self { cfg, lr, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], ranges: &[std::ops::Range<usize>]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for r in ranges {
            for i in r.clone() {
                let g = grad[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                params[i] -= self.lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

pub(crate) fn trainable_ranges(model: &Classifier, t: Trainable) -> Result<Vec<std::ops::Range<usize>>> {
    let layout = model.layout();
    match t {
        Trainable::All => Ok(vec![0..layout.len]),
        Trainable::Head => {
            let mut r = vec![layout.head_weight.start..layout.head_bias.end];
            if let Some(a) = &layout.attention {
                r.push(a.weight.start..a.bias.end);
            }
            Ok(r)
        }
        Trainable::Attention => {
            let a = layout
                .attention
                .ok_or_else(|| Error::Capability("model has no attention module to train".into()))?;
            Ok(vec![a.weight.start..a.bias.end])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample total loss over the epoch.
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

/// Runs `cfg.epochs` passes of mini-batch Adam over `items`.
///
/// The shuffle order is drawn from `cfg.seed`, so identical inputs give
/// bit-identical parameters.
pub fn train(
    mut model: Classifier,
    items: &[TrainItem],
    val: Option<&[TrainItem]>,
    objective: &dyn Objective,
    cfg: &TrainConfig,
) -> Result<(Classifier, TrainTrace)> {
    cfg.validate()?;
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((model, trace));
    }
    if items.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let ranges = trainable_ranges(&model, cfg.trainable)?;
    let scope = if cfg.trainable == Trainable::All { ParamScope::All } else { ParamScope::Head };
    let n_params = model.params().len();
    let mut adam = Adam::new(n_params, cfg.learning_rate, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut grad = vec![0.0; n_params];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = objective.evaluate(&model, &batch, scope, &mut grad)?;
            if !loss.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: batch.iter().map(|b| b.id.to_string()).collect(),
                });
            }
            adam.step(model.params_mut(), &grad, &ranges);
            epoch_loss.merge(&loss);
            step += 1;
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(&model, v)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            loss: epoch_loss.total() / epoch_loss.count as f64,
            train_accuracy: epoch_loss.correct as f64 / epoch_loss.count as f64,
            val_accuracy,
        };
        log::debug!(
            "{} epoch {epoch}: loss {:.5} train acc {:.3} val acc {:?}",
            objective.name(),
            rec.loss,
            rec.train_accuracy,
            rec.val_accuracy
        );
        trace.epochs.push(rec);
    }
    Ok((model, trace))
}

pub fn accuracy(model: &Classifier, items: &[TrainItem]) -> Result<f64> {
    let images: Vec<&Image> = items.iter().map(|i| i.image).collect();
    let probs = predict_proba(model, &images)?;
    let correct = probs.iter().zip(items).filter(|(p, it)| argmax(p) == it.label).count();
    Ok(correct as f64 / items.len() as f64)
}

fn check_image(model: &Classifier, img: &Image) -> Result<()> {
    let a = model.arch();
    if img.height() != a.input_size || img.width() != a.input_size || img.channels() != a.in_channels {
        return Err(Error::Validation(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            img.channels(),
            img.height(),
            img.width(),
            a.in_channels,
            a.input_size,
            a.input_size
        )));
    }
    Ok(())
}

/// Softmax class probabilities per image.
pub fn predict_proba(model: &Classifier, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            check_image(model, img)?;
            Ok(model.forward(img.to_f64()).probs())
        })
        .collect()
}

/// `∂/∂x Σ_k log ŷ_k` for each image, in the image's planar layout.
pub fn input_gradients(model: &Classifier, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            check_image(model, img)?;
            let tape = model.forward(img.to_f64());
            let (_, seed) = log_prob_sum_seed(&tape.log_probs());
            Ok(model.backward(&tape, &seed, GradRequest::INPUT, None).input.expect("input gradient requested"))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    architecture: Architecture,
    seed: u64,
    params: Vec<f64>,
}

/// Writes architecture, training seed and parameters to one JSON file.
pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    let ck = Checkpoint { architecture: model.arch().clone(), seed: model.seed(), params: model.params().to_vec() };
    let text = serde_json::to_string(&ck)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    Classifier::from_parts(ck.architecture, ck.params, ck.seed)
}

/// Appends `epoch,loss,val_accuracy` rows, writing the header for a new file.
pub fn append_trace_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str("epoch,loss,val_accuracy\n");
    }
    for e in &trace.epochs {
        let val = e.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        buf.push_str(&format!("{},{},{}\n", e.epoch, e.loss, val));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
