//! Synthetic two-class images whose background colour can be made to leak
//! the label.
//!
//! Every image shows a class-specific foreground object on a noisy grey
//! background that carries a cue, either warm (red up, blue down) or cool.
//! The cue is a colour cast over the whole background or a small saturated
//! square in one corner. In the training split the cue equals the label with
//! probability `bias_strength`; otherwise, and always outside the training
//! split, it is a fair coin flip. The relevance mask marks the whole
//! background, cue included, as irrelevant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assign_splits, Dataset, Image, Mask, Sample, Split, SplitFractions};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForegroundKind {
    /// An elliptical blob filled with horizontal (class 0) or vertical
    /// (class 1) stripes.
    Stripes,
    /// A solid disk (class 0) or square (class 1).
    Shapes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    /// Colour cast of magnitude `cue_strength` over the whole background.
    Cast,
    /// A red (class 0) or blue (class 1) square of side `patch_fraction`
    /// times the image side, in a random corner.
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBiasSpec {
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub n_per_class: usize,
    pub bias_strength: f64,
    #[serde(default = "default_kind")]
    pub foreground_kind: ForegroundKind,
    pub seed: u64,
    /// Per-class override of `bias_strength` for class-asymmetric bias.
    #[serde(default)]
    pub class_bias: Option<[f64; 2]>,
    #[serde(default = "default_cue_kind")]
    pub cue_kind: CueKind,
    #[serde(default = "default_patch")]
    pub patch_fraction: f64,
    /// Magnitude of the background colour cast (`cue_kind = cast` only).
    #[serde(default = "default_cue")]
    pub cue_strength: f64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default = "default_names")]
    pub class_names: [String; 2],
}

fn default_size() -> usize {
    128
}
fn default_kind() -> ForegroundKind {
    ForegroundKind::Stripes
}
fn default_cue_kind() -> CueKind {
    CueKind::Cast
}
fn default_patch() -> f64 {
    0.125
}
fn default_cue() -> f64 {
    0.25
}
fn default_names() -> [String; 2] {
    ["class_0".into(), "class_1".into()]
}

impl SyntheticBiasSpec {
    pub fn new(image_size: usize, n_per_class: usize, bias_strength: f64, seed: u64) -> Self {
        Self {
            image_size,
            n_per_class,
            bias_strength,
            foreground_kind: ForegroundKind::Stripes,
            seed,
            class_bias: None,
            cue_kind: default_cue_kind(),
            patch_fraction: default_patch(),
            cue_strength: default_cue(),
            split: SplitFractions::default(),
            class_names: default_names(),
        }
    }

    /// Probability that a training image of `label` carries the matching cue.
    pub fn bias_for(&self, label: usize) -> f64 {
        self.class_bias.map(|b| b[label]).unwrap_or(self.bias_strength)
    }

    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.bias_strength) || !self.class_bias.map_or(true, |b| unit(b[0]) && unit(b[1])) {
            return Err(Error::Spec("bias strengths must lie in [0, 1]".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Spec("image_size must be at least 16".into()));
        }
        if !(0.0..=0.25).contains(&self.patch_fraction) {
            return Err(Error::Spec("patch_fraction must lie in [0, 0.25]".into()));
        }
        if !(0.0..=0.5).contains(&self.cue_strength) {
            return Err(Error::Spec("cue_strength must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

struct Geometry {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Geometry {
    fn contains(&self, kind: ForegroundKind, label: usize, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match (kind, label) {
            (ForegroundKind::Stripes, _) => (dy / self.ry).powi(2) + (dx / self.rx).powi(2) <= 1.0,
            (ForegroundKind::Shapes, 0) => dy * dy + dx * dx <= self.rx * self.rx,
            // square with the disk's area
            (ForegroundKind::Shapes, _) => {
                let half = self.rx * std::f64::consts::PI.sqrt() / 2.0;
                dy.abs() <= half && dx.abs() <= half
            }
        }
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

pub fn generate_synthetic_biased(spec: &SyntheticBiasSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_per_class * 2;
    let items: Vec<(String, usize)> = (0..n).map(|i| (format!("syn{i:05}"), i / spec.n_per_class.max(1))).collect();
    let splits = assign_splits(&items, spec.seed, spec.split);
    for split in [Split::Train, Split::Val, Split::Test] {
        for c in 0..2 {
            let count = items.iter().filter(|(id, l)| *l == c && splits[id] == split).count();
            if count < 2 {
                return Err(Error::Spec(format!(
                    "n_per_class={} leaves {count} images of class {c} in the {} split (need >= 2)",
                    spec.n_per_class,
                    split.as_str()
                )));
            }
        }
    }
    let samples = items
        .iter()
        .enumerate()
        .map(|(i, (id, label))| render(spec, i as u64, id, *label, splits[id]))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, splits, spec.class_names.clone())
}

fn render(spec: &SyntheticBiasSpec, index: u64, id: &str, label: usize, split: Split) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index + 1);
    let s = spec.image_size as f64;
    let cue = if split == Split::Train && rng.gen_bool(spec.bias_for(label)) {
        label
    } else {
        rng.gen_range(0..2)
    };
    let geom = Geometry {
        cy: rng.gen_range(0.38..0.62) * s,
        cx: rng.gen_range(0.32..0.68) * s,
        ry: rng.gen_range(0.22..0.28) * s,
        rx: rng.gen_range(0.15..0.2) * s,
    };
    let period = (spec.image_size / 16).max(2) as f64;
    let phase = rng.gen_range(0.0..period);
    let base = rng.gen_range(0.4..0.6);
    let size = spec.image_size;
    let side = ((size as f64 * spec.patch_fraction).round() as usize).max(1);
    let margin = size / 32;
    let corner = rng.gen_range(0..4usize);
    let patch_y = if corner < 2 { margin } else { size - margin - side };
    let patch_x = if corner % 2 == 0 { margin } else { size - margin - side };
    let in_patch = |y: usize, x: usize| {
        spec.cue_kind == CueKind::Patch && (patch_y..patch_y + side).contains(&y) && (patch_x..patch_x + side).contains(&x)
    };
    let cast = match (spec.cue_kind, cue) {
        (CueKind::Patch, _) => 0.0,
        (CueKind::Cast, 0) => spec.cue_strength,
        (CueKind::Cast, _) => -spec.cue_strength,
    };
    let mut data = vec![0f32; 3 * size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let p = y * size + x;
            let rgb = if geom.contains(spec.foreground_kind, label, yc, xc) {
                let v = match spec.foreground_kind {
                    ForegroundKind::Stripes => {
                        let coord = if label == 0 { yc } else { xc };
                        if ((coord + phase) / period).floor() as i64 % 2 == 0 {
                            0.3
                        } else {
                            0.8
                        }
                    }
                    ForegroundKind::Shapes => 0.85,
                } + rng.gen_range(-0.04..0.04);
                [v, v, v]
            } else if in_patch(y, x) {
                mask[p] = 1;
                let v = rng.gen_range(-0.04..0.04);
                if cue == 0 {
                    [0.85 + v, 0.2 + v, 0.2 + v]
                } else {
                    [0.2 + v, 0.2 + v, 0.85 + v]
                }
            } else {
                mask[p] = 1;
                let g = base + rng.gen_range(-0.08..0.08);
                [g + cast, g, g - cast]
            };
            for c in 0..3 {
                data[c * size * size + p] = quantize(rgb[c]);
            }
        }
    }
    let mask = Mask::new(size, size, mask)?;
    if mask.count_ones() == 0 || mask.count_ones() == mask.len() {
        return Err(Error::Spec(format!("{id}: degenerate foreground geometry")));
    }
    Sample::new(id, Image::new(size, size, 3, data)?, label, mask)
}
