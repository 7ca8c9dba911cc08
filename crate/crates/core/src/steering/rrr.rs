//! Input-gradient penalty objective:
//!
//! `L(θ) = Σ_n CE_n + λ1 Σ_n Σ_d A_nd (∂/∂x_nd Σ_k log ŷ_nk)² + λ2 Σ_i θ_i²`
//!
//! The penalty's parameter gradient needs the mixed second derivative of
//! `f = Σ_k log ŷ_k`. With `g = ∂f/∂x` and `v = A ⊙ g`,
//! `∂/∂θ Σ_d A_d g_d² = 2 (∂²f/∂θ∂x) v`, which is the directional derivative
//! of `∇_θ f` along `x + εv`. We obtain it by running the ordinary reverse
//! pass on dual numbers whose tangent is seeded with `v`.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_seed, log_prob_sum_seed, Classifier, Dual, GradRequest, ParamScope};
use crate::trainer::{argmax, LossBreakdown, Objective, TrainItem};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrrWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RrrWeights {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 1e-4 }
    }
}

impl RrrWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Rrr {
    pub weights: RrrWeights,
}

impl Rrr {
    pub fn new(weights: RrrWeights) -> Self {
        Self { weights }
    }
}

/// Loss value and its three components, without gradients.
pub fn rrr_loss(model: &Classifier, batch: &[TrainItem], w: RrrWeights) -> Result<LossBreakdown> {
    Rrr::new(w).evaluate(model, batch, ParamScope::None, &mut [])
}

fn check_mask(item: &TrainItem, mask: &Mask) -> Result<()> {
    if mask.height() != item.image.height() || mask.width() != item.image.width() {
        return Err(Error::Validation(format!("{}: mask is not aligned with the image", item.id)));
    }
    Ok(())
}

impl Objective for Rrr {
    fn name(&self) -> &'static str {
        "rrr"
    }

    fn evaluate(&self, model: &Classifier, batch: &[TrainItem], scope: ParamScope, grad: &mut [f64])
        -> Result<LossBreakdown> {
        self.weights.validate()?;
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let RrrWeights { lambda1, lambda2 } = self.weights;
        let want = scope != ParamScope::None;
        let mut out = LossBreakdown::default();
        let mut dual_grad: Vec<Dual> = Vec::new();
        for item in batch {
            model.check_input(item.image.data().len())?;
            let x = item.image.to_f64();
            let tape = model.forward(x.clone());
            let log_probs = tape.log_probs();
            let (ce, seed) = cross_entropy_seed(&log_probs, item.label);
            out.cross_entropy += ce;
            out.correct += (argmax(&tape.probs()) == item.label) as usize;
            out.count += 1;
            if want {
                let req = GradRequest { params: scope, input: false, features: false };
                model.backward(&tape, &seed, req, Some(grad));
            }
            let mask = match item.mask {
                Some(m) if lambda1 > 0.0 && m.count_ones() > 0 => m,
                _ => continue,
            };
            check_mask(item, mask)?;
            let (_, fseed) = log_prob_sum_seed(&log_probs);
            let g = model.backward(&tape, &fseed, GradRequest::INPUT, None).input.expect("input gradient");
            let hw = mask.len();
            let a = mask.data();
            let mut penalty = 0.0;
            let v: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(d, &gd)| {
                    if a[d % hw] == 1 {
                        penalty += gd * gd;
                        gd
                    } else {
                        0.0
                    }
                })
                .collect();
            out.right_reasons += lambda1 * penalty;
            if !want {
                continue;
            }
            let xd: Vec<Dual> = x.iter().zip(&v).map(|(&re, &du)| Dual::new(re, du)).collect();
            let dtape = model.forward(xd);
            let (_, dseed) = log_prob_sum_seed(&dtape.log_probs());
            dual_grad.clear();
            dual_grad.resize(grad.len(), Dual::default());
            let req = GradRequest { params: scope, input: false, features: false };
            model.backward(&dtape, &dseed, req, Some(&mut dual_grad));
            for (gi, d) in grad.iter_mut().zip(&dual_grad) {
                *gi += 2.0 * lambda1 * d.du;
            }
        }
        if lambda2 > 0.0 {
            out.regularization = lambda2 * model.params().iter().map(|p| p * p).sum::<f64>();
            if want {
                for (gi, p) in grad.iter_mut().zip(model.params()) {
                    *gi += 2.0 * lambda2 * p;
                }
            }
        }
        Ok(out)
    }
}
