//! Classifier forward and reverse passes over a flat parameter vector.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Activation, Architecture, BlockShape, ParamLayout};
use super::ops::{conv_backward, conv_forward, max_pool};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A small convolutional classifier with an optional bounded-logit attention
/// pooling stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    arch: Architecture,
    params: Vec<f64>,
    seed: u64,
}

/// Which parameter groups the reverse pass should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    None,
    /// Logit head and attention module only; the backbone is not traversed.
    Head,
    All,
}

#[derive(Clone, Copy, Debug)]
pub struct GradRequest {
    pub params: ParamScope,
    pub input: bool,
    pub features: bool,
}

impl GradRequest {
    pub const PARAMS: GradRequest = GradRequest { params: ParamScope::All, input: false, features: false };
    pub const INPUT: GradRequest = GradRequest { params: ParamScope::None, input: true, features: false };
    pub const FEATURES: GradRequest = GradRequest { params: ParamScope::None, input: false, features: true };
}

struct BlockTape<S> {
    /// Pre-activation conv output.
    z: Vec<S>,
    /// Post-activation.
    a: Vec<S>,
    /// Pooled output and argmax indices into `a`, when the block pools.
    pooled: Option<(Vec<S>, Vec<u32>)>,
}

impl<S> BlockTape<S> {
    fn output(&self) -> &[S] {
        match &self.pooled {
            Some((p, _)) => p,
            None => &self.a,
        }
    }
}

struct AttentionTape<S> {
    /// Raw attention logits per location.
    logits: Vec<S>,
    /// Normalised attention weights per location.
    weights: Vec<S>,
}

/// Everything recorded by a forward pass that the reverse pass needs.
pub struct Tape<S> {
    input: Vec<S>,
    blocks: Vec<BlockTape<S>>,
    attention: Option<AttentionTape<S>>,
    pooled: Vec<S>,
    pub logits: Vec<S>,
}

impl<S: Scalar> Tape<S> {
    /// Maps entering global pooling (last conv block output, or the input
    /// itself for conv-less models).
    pub fn features(&self) -> &[S] {
        match self.blocks.last() {
            Some(b) => b.output(),
            None => &self.input,
        }
    }

    pub fn log_probs(&self) -> Vec<S> {
        log_softmax(&self.logits)
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits.iter().map(|l| l.re()).collect::<Vec<_>>())
    }

    /// Raw attention logits, when the model carries an attention module.
    pub fn attention_logits(&self) -> Option<&[S]> {
        self.attention.as_ref().map(|a| a.logits.as_slice())
    }
}

pub struct Backward<S> {
    pub input: Option<Vec<S>>,
    pub features: Option<Vec<S>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().map(|l| l.re()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = S::default();
    for &l in logits {
        z += (l - S::from_f64(m)).exp();
    }
    let lse = z.ln() + S::from_f64(m);
    logits.iter().map(|&l| l - lse).collect()
}

#[inline]
fn activate<S: Scalar>(act: Activation, z: S) -> S {
    match act {
        Activation::Relu => {
            if z.re() > 0.0 {
                z
            } else {
                S::default()
            }
        }
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
    }
}

/// `d activation / d z` evaluated from the pre-activation `z` and output `a`.
#[inline]
fn activation_grad<S: Scalar>(act: Activation, z: S, a: S) -> S {
    match act {
        Activation::Relu => {
            if z.re() > 0.0 {
                S::from_f64(1.0)
            } else {
                S::default()
            }
        }
        Activation::Tanh => S::from_f64(1.0) - a * a,
        Activation::Identity => S::from_f64(1.0),
    }
}

/// Bounded logit: `min(s, 0)`. The derivative at the bound is taken as 1 so
/// a freshly attached, zero-initialised module still receives gradient.
#[inline]
fn bound<S: Scalar>(s: S) -> (S, bool) {
    if s.re() <= 0.0 {
        (s, true)
    } else {
        (S::default(), false)
    }
}

impl Classifier {
    /// Fresh classifier with seeded He-uniform conv weights, Glorot-uniform
    /// head weights, zero biases and zero attention parameters.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (shape, cp) in arch.block_shapes().iter().zip(&layout.conv) {
            let fan_in = (shape.conv.in_c * shape.conv.kernel * shape.conv.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for p in &mut params[cp.weight.clone()] {
                *p = dist.sample(&mut rng);
            }
        }
        let (fc, _, _) = arch.feature_shape();
        let bound = (6.0 / (fc + arch.num_classes) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for p in &mut params[layout.head_weight.clone()] {
            *p = dist.sample(&mut rng);
        }
        Ok(Self { arch, params, seed })
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.layout().len {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                arch.layout().len,
                params.len()
            )));
        }
        Ok(Self { arch, params, seed })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> ParamLayout {
        self.arch.layout()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn has_attention(&self) -> bool {
        self.arch.attention
    }

    /// Switches the architecture to attention pooling, appending zeroed
    /// attention parameters.
    pub(crate) fn enable_attention(&mut self) -> Result<()> {
        if self.arch.attention {
            return Err(Error::State("attention module already attached".into()));
        }
        if !self.arch.has_conv() {
            return Err(Error::Capability("model has no convolutional layer to attach attention to".into()));
        }
        self.arch.attention = true;
        let len = self.arch.layout().len;
        self.params.resize(len, 0.0);
        Ok(())
    }

    pub fn check_input(&self, len: usize) -> Result<()> {
        if len != self.arch.input_len() {
            return Err(Error::Validation(format!(
                "input has {len} values, model expects {} ({}x{}x{})",
                self.arch.input_len(),
                self.arch.in_channels,
                self.arch.input_size,
                self.arch.input_size
            )));
        }
        Ok(())
    }

    /// Forward pass over a planar `C × H × W` input.
    pub fn forward<S: Scalar>(&self, input: Vec<S>) -> Tape<S> {
        debug_assert_eq!(input.len(), self.arch.input_len());
        let layout = self.arch.layout();
        let shapes = self.arch.block_shapes();
        let act = self.arch.activation;
        let mut blocks: Vec<BlockTape<S>> = Vec::with_capacity(shapes.len());
        for (i, (shape, cp)) in shapes.iter().zip(&layout.conv).enumerate() {
            let g = &shape.conv;
            let src: &[S] = if i == 0 { &input } else { blocks[i - 1].output() };
            let mut z = vec![S::default(); g.out_c * g.out_h * g.out_w];
            conv_forward(g, src, &self.params[cp.weight.clone()], &self.params[cp.bias.clone()], &mut z);
            let a: Vec<S> = z.iter().map(|&v| activate(act, v)).collect();
            let pooled = (shape.pool > 1).then(|| max_pool(&a, g.out_c, g.out_h, g.out_w, shape.pool));
            blocks.push(BlockTape { z, a, pooled });
        }
        self.pool_and_classify(input, blocks, None)
    }

    /// Forward pass starting from cached feature maps, skipping the backbone.
    /// The returned tape supports `backward` with `ParamScope::Head`.
    pub fn forward_head<S: Scalar>(&self, features: Vec<S>) -> Tape<S> {
        let (fc, fh, fw) = self.arch.feature_shape();
        debug_assert_eq!(features.len(), fc * fh * fw);
        self.pool_and_classify(features, Vec::new(), None)
    }

    /// Class probabilities from cached features with some spatial locations
    /// deleted (`keep[j] == false`). Deleted locations contribute nothing but
    /// the pooling normaliser is left as is, as if their features were zero.
    pub fn probs_with_locations(&self, features: &[f64], keep: &[bool]) -> Vec<f64> {
        self.pool_and_classify(features.to_vec(), Vec::new(), Some(keep)).probs()
    }

    fn pool_and_classify<S: Scalar>(&self, input: Vec<S>, blocks: Vec<BlockTape<S>>, keep: Option<&[bool]>) -> Tape<S> {
        let layout = self.arch.layout();
        let (fc, fh, fw) = self.arch.feature_shape();
        let hw = fh * fw;
        let kept = |j: usize| keep.map_or(true, |k| k[j]);
        let features: &[S] = match blocks.last() {
            Some(b) => b.output(),
            None => &input,
        };
        let mut pooled = vec![S::default(); fc];
        let attention = match &layout.attention {
            None => {
                let inv = 1.0 / hw as f64;
                for c in 0..fc {
                    let mut acc = S::default();
                    for (j, &v) in features[c * hw..(c + 1) * hw].iter().enumerate() {
                        if kept(j) {
                            acc += v;
                        }
                    }
                    pooled[c] = acc * inv;
                }
                None
            }
            Some(ap) => {
                let u = &self.params[ap.weight.clone()];
                let b0 = self.params[ap.bias.start];
                let mut logits = vec![S::from_f64(b0); hw];
                for c in 0..fc {
                    for (l, &f) in logits.iter_mut().zip(&features[c * hw..(c + 1) * hw]) {
                        *l += f * u[c];
                    }
                }
                let e: Vec<S> = logits.iter().map(|&s| bound(s).0.exp()).collect();
                let mut z = S::default();
                for &v in &e {
                    z += v;
                }
                let weights: Vec<S> = e.iter().enumerate().map(|(j, &v)| if kept(j) { v / z } else { S::default() }).collect();
                for c in 0..fc {
                    let mut acc = S::default();
                    for (&w, &f) in weights.iter().zip(&features[c * hw..(c + 1) * hw]) {
                        acc += w * f;
                    }
                    pooled[c] = acc;
                }
                Some(AttentionTape { logits, weights })
            }
        };
        let k = self.arch.num_classes;
        let hw_ = &self.params[layout.head_weight.clone()];
        let hb = &self.params[layout.head_bias.clone()];
        let logits = (0..k)
            .map(|j| {
                let mut acc = S::from_f64(hb[j]);
                for c in 0..fc {
                    acc += pooled[c] * hw_[j * fc + c];
                }
                acc
            })
            .collect();
        Tape { input, blocks, attention, pooled, logits }
    }

    /// Reverse pass seeded with `d objective / d logits`.
    ///
    /// Parameter gradients are accumulated into `param_grad` (which must be
    /// `layout.len` long when `req.params != None`).
    pub fn backward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        seed: &[S],
        req: GradRequest,
        mut param_grad: Option<&mut [S]>,
    ) -> Backward<S> {
        let layout = self.arch.layout();
        let (fc, fh, fw) = self.arch.feature_shape();
        let hw = fh * fw;
        let k = self.arch.num_classes;
        let head_w = &self.params[layout.head_weight.clone()];
        let want_params = req.params != ParamScope::None;
        if want_params {
            let g = param_grad.as_deref_mut().expect("parameter gradient buffer required");
            for j in 0..k {
                for c in 0..fc {
                    g[layout.head_weight.start + j * fc + c] += seed[j] * tape.pooled[c];
                }
                g[layout.head_bias.start + j] += seed[j];
            }
        }
        let mut dpooled = vec![S::default(); fc];
        for j in 0..k {
            for c in 0..fc {
                dpooled[c] += seed[j] * head_w[j * fc + c];
            }
        }
        let features = tape.features();
        let mut dfeat = vec![S::default(); fc * hw];
        match (&layout.attention, &tape.attention) {
            (Some(ap), Some(at)) => {
                let u = &self.params[ap.weight.clone()];
                // pooled_c = Σ_j w_j f_cj
                let mut dw = vec![S::default(); hw];
                for c in 0..fc {
                    let fplane = &features[c * hw..(c + 1) * hw];
                    let dplane = &mut dfeat[c * hw..(c + 1) * hw];
                    for j in 0..hw {
                        dw[j] += dpooled[c] * fplane[j];
                        dplane[j] += dpooled[c] * at.weights[j];
                    }
                }
                let mut wdw = S::default();
                for j in 0..hw {
                    wdw += at.weights[j] * dw[j];
                }
                let ds: Vec<S> = (0..hw)
                    .map(|j| {
                        if bound(at.logits[j]).1 {
                            at.weights[j] * (dw[j] - wdw)
                        } else {
                            S::default()
                        }
                    })
                    .collect();
                if want_params {
                    let g = param_grad.as_deref_mut().unwrap();
                    for c in 0..fc {
                        let mut acc = S::default();
                        for (&d, &f) in ds.iter().zip(&features[c * hw..(c + 1) * hw]) {
                            acc += d * f;
                        }
                        g[ap.weight.start + c] += acc;
                    }
                    let mut acc = S::default();
                    for &d in &ds {
                        acc += d;
                    }
                    g[ap.bias.start] += acc;
                }
                for c in 0..fc {
                    for (df, &d) in dfeat[c * hw..(c + 1) * hw].iter_mut().zip(&ds) {
                        *df += d * u[c];
                    }
                }
            }
            _ => {
                let inv = 1.0 / hw as f64;
                for c in 0..fc {
                    let d = dpooled[c] * inv;
                    dfeat[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = d);
                }
            }
        }
        let features_grad = req.features.then(|| dfeat.clone());
        let traverse_backbone = req.input || req.params == ParamScope::All;
        if !traverse_backbone {
            return Backward { input: None, features: features_grad };
        }
        if tape.blocks.is_empty() {
            return Backward { input: req.input.then_some(dfeat), features: features_grad };
        }
        let shapes = self.arch.block_shapes();
        let act = self.arch.activation;
        let mut dout = dfeat;
        let mut input_grad = None;
        for i in (0..tape.blocks.len()).rev() {
            let bt = &tape.blocks[i];
            let shape: &BlockShape = &shapes[i];
            let g = &shape.conv;
            let mut da = match &bt.pooled {
                Some((_, arg)) => {
                    let mut da = vec![S::default(); bt.a.len()];
                    for (&idx, &d) in arg.iter().zip(&dout) {
                        da[idx as usize] += d;
                    }
                    da
                }
                None => dout,
            };
            for ((d, &z), &a) in da.iter_mut().zip(&bt.z).zip(&bt.a) {
                *d = *d * activation_grad(act, z, a);
            }
            let src: &[S] = if i == 0 { &tape.input } else { tape.blocks[i - 1].output() };
            let need_input = i > 0 || req.input;
            let mut din = need_input.then(|| vec![S::default(); g.in_c * g.in_h * g.in_w]);
            let cp = &layout.conv[i];
            let (dw, db) = if req.params == ParamScope::All {
                let g = param_grad.as_deref_mut().unwrap();
                let (head, tail) = g.split_at_mut(cp.bias.start);
                (Some(&mut head[cp.weight.clone()]), Some(&mut tail[..cp.bias.len()]))
            } else {
                (None, None)
            };
            conv_backward(g, src, &self.params[cp.weight.clone()], &da, dw, db, din.as_deref_mut());
            if i == 0 {
                input_grad = din;
                break;
            }
            dout = din.unwrap();
        }
        Backward { input: input_grad, features: features_grad }
    }
}

/// `d/d logits` of the clamped cross-entropy `-log max(ŷ_label, floor)`.
pub fn cross_entropy_seed<S: Scalar>(log_probs: &[S], label: usize) -> (S, Vec<S>) {
    let floor = PROB_FLOOR.ln();
    let lp = log_probs[label];
    if lp.re() < floor {
        return (S::from_f64(-floor), vec![S::default(); log_probs.len()]);
    }
    let seed = log_probs
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let p = l.exp();
            if j == label {
                p - S::from_f64(1.0)
            } else {
                p
            }
        })
        .collect();
    (-lp, seed)
}

/// Value and logit-gradient of `Σ_k log max(ŷ_k, floor)`, the quantity whose
/// input gradient the right-reasons penalty constrains.
pub fn log_prob_sum_seed<S: Scalar>(log_probs: &[S]) -> (S, Vec<S>) {
    let floor = PROB_FLOOR.ln();
    let active: Vec<bool> = log_probs.iter().map(|l| l.re() >= floor).collect();
    let n_active = active.iter().filter(|&&a| a).count() as f64;
    let mut value = S::default();
    for (&l, &a) in log_probs.iter().zip(&active) {
        value += if a { l } else { S::from_f64(floor) };
    }
    // d/dz_j Σ_{k active} (z_k - lse) = [j active] - n_active·ŷ_j
    let seed = log_probs
        .iter()
        .zip(&active)
        .map(|(&l, &a)| {
            let base = if a { S::from_f64(1.0) } else { S::default() };
            base - l.exp() * n_active
        })
        .collect();
    (value, seed)
}
