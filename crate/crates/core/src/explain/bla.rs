//! Bounded-logit attention: a spatial attention pool over the last conv
//! layer whose logits are capped at zero by `β(s) = min(s, 0)`. Locations
//! with `s > 0` all saturate at the maximal weight and form the explanation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gradcam::check_target;
use super::{Method, SaliencyMap};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_seed, Classifier, GradRequest, ParamScope};
use crate::trainer::{argmax, trainable_ranges, Adam, EpochRecord, TrainConfig, TrainItem, TrainTrace, Trainable};

/// Inserts a zero-initialised attention module after the last conv block.
/// With zero parameters the pool equals average pooling, so predictions are
/// unchanged.
pub fn bla_attach(mut model: Classifier) -> Result<Classifier> {
    model.enable_attention()?;
    Ok(model)
}

fn require_bla(model: &Classifier) -> Result<()> {
    if model.has_attention() {
        Ok(())
    } else {
        Err(Error::Capability("model has no BLA module".into()))
    }
}

/// Trains the attention module (plus the logit head when
/// `cfg.trainable == Head`) on cached last-conv features; the backbone is
/// never touched.
pub fn bla_finetune(mut model: Classifier, items: &[TrainItem], cfg: &TrainConfig) -> Result<(Classifier, TrainTrace)> {
    require_bla(&model)?;
    cfg.validate()?;
    if cfg.trainable == Trainable::All {
        return Err(Error::Config("BLA finetuning keeps the backbone frozen; use trainable = attention or head".into()));
    }
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((model, trace));
    }
    if items.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut cache = Vec::with_capacity(items.len());
    for it in items {
        model.check_input(it.image.data().len())?;
        cache.push(model.forward(it.image.to_f64()).features().to_vec());
    }
    let ranges = trainable_ranges(&model, cfg.trainable)?;
    let n = model.params().len();
    let mut adam = Adam::new(n, cfg.learning_rate, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut grad = vec![0.0; n];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let tape = model.forward_head(cache[i].clone());
                let (ce, seed) = cross_entropy_seed(&tape.log_probs(), items[i].label);
                let req = GradRequest { params: ParamScope::Head, input: false, features: false };
                model.backward(&tape, &seed, req, Some(&mut grad));
                batch_loss += ce;
                correct += (argmax(&tape.probs()) == items[i].label) as usize;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: chunk.iter().map(|&i| items[i].id.to_string()).collect(),
                });
            }
            adam.step(model.params_mut(), &grad, &ranges);
            loss += batch_loss;
            step += 1;
        }
        trace.epochs.push(EpochRecord {
            epoch,
            loss: loss / items.len() as f64,
            train_accuracy: correct as f64 / items.len() as f64,
            val_accuracy: None,
        });
    }
    Ok((model, trace))
}

/// Selected locations (`s > 0`) on the last-conv grid, row-major.
pub fn bla_selection(model: &Classifier, image: &Image) -> Result<Vec<bool>> {
    require_bla(model)?;
    model.check_input(image.data().len())?;
    let tape = model.forward(image.to_f64());
    Ok(tape.attention_logits().expect("attention tape").iter().map(|&s| s > 0.0).collect())
}

/// Hard explanation: the conv-grid selection upsampled by nearest neighbour.
/// `target` only labels the map; the selection is class-independent.
pub fn bla_explain(model: &Classifier, image: &Image, target: usize) -> Result<SaliencyMap> {
    require_bla(model)?;
    check_target(model, image, target)?;
    let sel = bla_selection(model, image)?;
    let (_, fh, fw) = model.arch().feature_shape();
    let (h, w) = (image.height(), image.width());
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y * fh / h;
        for x in 0..w {
            values.push(if sel[gy * fw + x * fw / w] { 1.0 } else { 0.0 });
        }
    }
    SaliencyMap::new(h, w, values, target, Method::Bla)
}

/// L1 change of the class probabilities when the selected (`inside`) or the
/// unselected (`outside`) locations are removed from the attention pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionEffect {
    pub inside: f64,
    pub outside: f64,
    pub selected: usize,
}

pub fn bla_deletion_effect(model: &Classifier, image: &Image) -> Result<DeletionEffect> {
    require_bla(model)?;
    model.check_input(image.data().len())?;
    let tape = model.forward(image.to_f64());
    let sel: Vec<bool> = tape.attention_logits().expect("attention tape").iter().map(|&s| s > 0.0).collect();
    let base = tape.probs();
    let change = |keep: Vec<bool>| -> f64 {
        let p = model.probs_with_locations(tape.features(), &keep);
        p.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum()
    };
    Ok(DeletionEffect {
        inside: change(sel.iter().map(|s| !s).collect()),
        outside: change(sel.clone()),
        selected: sel.iter().filter(|&&s| s).count(),
    })
}
