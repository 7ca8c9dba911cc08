//! Label-preserving counterexamples that perturb only the pixels a user
//! marked as irrelevant.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Inversion,
    Posterization,
    Equalization,
    ColorJitter,
    Solarization,
}

impl Transform {
    /// Cycle order; counterexample `i` uses `SEQUENCE[i % 5]`.
    pub const SEQUENCE: [Transform; 5] = [
        Transform::Inversion,
        Transform::Posterization,
        Transform::Equalization,
        Transform::ColorJitter,
        Transform::Solarization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Inversion => "inversion",
            Transform::Posterization => "posterization",
            Transform::Equalization => "equalization",
            Transform::ColorJitter => "color_jitter",
            Transform::Solarization => "solarization",
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Transform::SEQUENCE
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown transform {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub sample: Sample,
    pub source_id: String,
    pub transform: Transform,
    pub iteration: usize,
}

const POSTERIZE_BITS: u32 = 2;
const JITTER: f64 = 0.4;
const SOLARIZE_THRESHOLD: f32 = 0.5;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Applies `t` to the pixels where `mask` is 1, leaving the rest untouched.
///
/// `rng` is only consumed by colour jitter.
pub fn apply_transform(image: &Image, mask: &Mask, t: Transform, rng: &mut impl Rng) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let hw = h * w;
    let sel: Vec<usize> = (0..hw).filter(|&p| mask.data()[p] == 1).collect();
    let mut data = image.data().to_vec();
    if sel.is_empty() {
        return image.clone();
    }
    match t {
        Transform::Inversion => {
            for c in 0..ch {
                for &p in &sel {
                    data[c * hw + p] = 1.0 - data[c * hw + p];
                }
            }
        }
        Transform::Posterization => {
            let keep = !((1u8 << (8 - POSTERIZE_BITS)) - 1);
            for c in 0..ch {
                for &p in &sel {
                    data[c * hw + p] = (to_u8(data[c * hw + p]) & keep) as f32 / 255.0;
                }
            }
        }
        Transform::Equalization => {
            for c in 0..ch {
                let mut hist = [0usize; 256];
                for &p in &sel {
                    hist[to_u8(data[c * hw + p]) as usize] += 1;
                }
                let mut cdf = [0usize; 256];
                let mut acc = 0;
                for (i, &n) in hist.iter().enumerate() {
                    acc += n;
                    cdf[i] = acc;
                }
                let cdf_min = cdf[hist.iter().position(|&n| n > 0).unwrap()];
                let n = sel.len();
                if n == cdf_min {
                    continue; // single level: nothing to spread
                }
                for &p in &sel {
                    let v = to_u8(data[c * hw + p]) as usize;
                    let e = ((cdf[v] - cdf_min) as f64 / (n - cdf_min) as f64 * 255.0).round();
                    data[c * hw + p] = e as f32 / 255.0;
                }
            }
        }
        Transform::ColorJitter => {
            let brightness = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
            let contrast = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
            let mut mean = 0.0;
            for c in 0..ch {
                for &p in &sel {
                    mean += data[c * hw + p] as f64 * brightness;
                }
            }
            mean /= (ch * sel.len()) as f64;
            for c in 0..ch {
                for &p in &sel {
                    let v = data[c * hw + p] as f64 * brightness;
                    data[c * hw + p] = to_u8((((v - mean) * contrast + mean) as f32).clamp(0.0, 1.0)) as f32 / 255.0;
                }
            }
        }
        Transform::Solarization => {
            for c in 0..ch {
                for &p in &sel {
                    let v = data[c * hw + p];
                    if v >= SOLARIZE_THRESHOLD {
                        data[c * hw + p] = 1.0 - v;
                    }
                }
            }
        }
    }
    Image::new(h, w, ch, data).expect("transform keeps values in range")
}

/// `k` counterexamples of `sample` under `mask` (1 = irrelevant), cycling
/// through [`Transform::SEQUENCE`].
///
/// Each counterexample carries `mask` as its relevance mask, so the
/// unperturbed region is exactly where the mask is 0.
///
/// Ids are `<source>_it<iteration>_ce<i>`. Jitter parameters come from
/// `seed`, the iteration and the source id, so reruns are identical.
pub fn caipi_counterexamples(
    sample: &Sample,
    mask: &Mask,
    k: usize,
    iteration: usize,
    seed: u64,
) -> Result<Vec<Counterexample>> {
    if mask.height() != sample.image.height() || mask.width() != sample.image.width() {
        return Err(Error::Validation(format!("{}: feedback mask does not match the image", sample.id)));
    }
    if k > 0 && mask.count_ones() == 0 {
        log::warn!("{}: no irrelevant pixels marked; counterexamples equal the source", sample.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(&sample.id));
    (0..k)
        .map(|i| {
            let transform = Transform::SEQUENCE[i % Transform::SEQUENCE.len()];
            let image = apply_transform(&sample.image, mask, transform, &mut rng);
            let id = format!("{}_it{iteration}_ce{i}", sample.id);
            Ok(Counterexample {
                sample: Sample::new(id, image, sample.label, mask.clone())?,
                source_id: sample.id.clone(),
                transform,
                iteration,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let (h, w) = (6, 6);
        let data: Vec<f32> = (0..3 * h * w).map(|i| ((i * 37 % 256) as f32) / 255.0).collect();
        let mask = Mask::from_fn(h, w, |y, x| !(2..4).contains(&y) || !(2..4).contains(&x));
        Sample::new("s1", Image::new(h, w, 3, data).unwrap(), 1, mask).unwrap()
    }

    #[test]
    fn three_counterexamples_use_first_three_transforms() {
        let s = sample();
        let ces = caipi_counterexamples(&s, &s.relevance_mask, 3, 0, 7).unwrap();
        let names: Vec<_> = ces.iter().map(|c| c.transform).collect();
        assert_eq!(names, Transform::SEQUENCE[..3]);
        for ce in &ces {
            assert_eq!(ce.sample.label, 1);
            assert_eq!(ce.source_id, "s1");
            assert_ne!(ce.sample.image, s.image);
        }
    }

    #[test]
    fn zero_k_is_empty() {
        let s = sample();
        assert!(caipi_counterexamples(&s, &s.relevance_mask, 0, 0, 7).unwrap().is_empty());
    }

    #[test]
    fn relevant_region_is_bit_identical() {
        let s = sample();
        let hw = 36;
        for ce in caipi_counterexamples(&s, &s.relevance_mask, 10, 2, 1).unwrap() {
            for c in 0..3 {
                for p in 0..hw {
                    if s.relevance_mask.data()[p] == 0 {
                        assert_eq!(ce.sample.image.data()[c * hw + p].to_bits(), s.image.data()[c * hw + p].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn all_relevant_mask_yields_copies() {
        let s = sample();
        let none = Mask::zeros(6, 6);
        for ce in caipi_counterexamples(&s, &none, 5, 0, 0).unwrap() {
            assert_eq!(ce.sample.image, s.image);
        }
    }

    #[test]
    fn transforms_match_hand_values() {
        let img = Image::new(1, 4, 1, vec![0.0, 100.0 / 255.0, 200.0 / 255.0, 1.0]).unwrap();
        let all = Mask::from_fn(1, 4, |_, _| true);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let px = |t| apply_transform(&img, &all, t, &mut rng.clone()).data().iter().map(|&v| to_u8(v)).collect::<Vec<_>>();
        assert_eq!(px(Transform::Inversion), vec![255, 155, 55, 0]);
        assert_eq!(px(Transform::Posterization), vec![0, 64, 192, 192]);
        // four distinct levels spread to 0, 85, 170, 255
        assert_eq!(px(Transform::Equalization), vec![0, 85, 170, 255]);
        assert_eq!(px(Transform::Solarization), vec![0, 100, 55, 0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = sample();
        let a = caipi_counterexamples(&s, &s.relevance_mask, 5, 3, 11).unwrap();
        let b = caipi_counterexamples(&s, &s.relevance_mask, 5, 3, 11).unwrap();
        assert_eq!(a, b);
    }
}
