//! Samples, datasets, deterministic splits, on-disk ingestion and the
//! synthetic biased-background generator.

mod io;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{image_to_rgb, load_dataset, load_dataset_with, read_mask_png, write_dataset, write_mask_png, LoadOptions};
pub use synthetic::{generate_synthetic_biased, CueKind, ForegroundKind, SyntheticBiasSpec};

/// Default square resolution images are resized to at load time.
pub const DEFAULT_RESOLUTION: usize = 128;

/// Planar (channels-first) image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Validation(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value.clamp(0.0, 1.0); height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Raw planar buffer: channel `c`, row `y`, column `x` lives at
    /// `(c * height + y) * width + x`.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Writes a value, clamping it to `[0, 1]`.
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Binary `H × W` grid. As a relevance mask, 1 marks an irrelevant
/// (background) pixel and 0 a relevant one.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "mask has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
    pub fn inverted(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|v| 1 - v).collect() }
    }
    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v == 1).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    /// 1 = irrelevant pixel, 0 = relevant pixel.
    pub relevance_mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, label: usize, relevance_mask: Mask) -> Result<Self> {
        let id = id.into();
        if relevance_mask.height() != image.height() || relevance_mask.width() != image.width() {
            return Err(Error::Validation(format!("{id}: relevance mask shape differs from image")));
        }
        if label > 1 {
            return Err(Error::Validation(format!("{id}: label {label} is not in {{0, 1}}")));
        }
        Ok(Self { id, image, label, relevance_mask })
    }

    /// Ground-truth person mask (complement of the relevance mask).
    pub fn person_mask(&self) -> Mask {
        self.relevance_mask.inverted()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15 }
    }
}

impl SplitFractions {
    /// `(train, val, test)` counts: floors for train and val, remainder to test.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64 + 1e-9).floor() as usize;
        let val = (self.val * n as f64 + 1e-9).floor() as usize;
        let train = train.min(n);
        let val = val.min(n - train);
        (train, val, n - train - val)
    }
}

/// Deterministic split assignment.
///
/// Ids are shuffled within each class, the classes are interleaved
/// round-robin, and the resulting order is cut at the train/val counts, so
/// every split sees both classes in near-equal proportion.
pub fn assign_splits(items: &[(String, usize)], seed: u64, fractions: SplitFractions) -> BTreeMap<String, Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, label) in items {
        by_class.entry(*label).or_default().push(id);
    }
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(items.len());
    let mut cursors: Vec<std::vec::IntoIter<&str>> = by_class.into_values().map(|v| v.into_iter()).collect();
    loop {
        let mut any = false;
        for c in cursors.iter_mut() {
            if let Some(id) = c.next() {
                order.push(id);
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    let (train, val, _) = fractions.counts(order.len());
    order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect()
}

/// Immutable collection of samples plus split assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    splits: BTreeMap<String, Split>,
    class_names: [String; 2],
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, splits: BTreeMap<String, Split>, class_names: [String; 2]) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            if !splits.contains_key(&s.id) {
                return Err(Error::Validation(format!("sample `{}` has no split", s.id)));
            }
        }
        if splits.len() != samples.len() {
            return Err(Error::Validation("split assignment references unknown ids".into()));
        }
        Ok(Self { samples, splits, class_names, index })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String; 2] {
        &self.class_names
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    pub fn split_assignment(&self) -> &BTreeMap<String, Split> {
        &self.splits
    }

    /// Samples of one split in dataset order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| self.splits[&s.id] == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Confirms every split holds both classes.
    pub fn check_class_coverage(&self) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            let s = self.split(split);
            for c in 0..2 {
                if !s.iter().any(|x| x.label == c) {
                    return Err(Error::Validation(format!("{} split lacks class {c}", split.as_str())));
                }
            }
        }
        Ok(())
    }

    /// Rebuilds the id index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("img{i:04}"), i % 2)).collect()
    }

    #[test]
    fn full_sized_dataset_splits_by_floor_rule() {
        let splits = assign_splits(&items(1830), 7, SplitFractions::default());
        let count = |s| splits.values().filter(|&&v| v == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (1281, 274, 275));
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let a = assign_splits(&items(100), 7, SplitFractions::default());
        let b = assign_splits(&items(100), 7, SplitFractions::default());
        let c = assign_splits(&items(100), 8, SplitFractions::default());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_is_a_partition_with_both_classes() {
        let it = items(40);
        let splits = assign_splits(&it, 3, SplitFractions::default());
        assert_eq!(splits.len(), 40);
        for split in [Split::Train, Split::Val, Split::Test] {
            for c in 0..2 {
                assert!(it.iter().any(|(id, l)| *l == c && splits[id] == split));
            }
        }
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let s = Sample::new("a", Image::filled(2, 2, 3, 0.5), 0, Mask::zeros(2, 2)).unwrap();
        let mut splits = BTreeMap::new();
        splits.insert("a".to_string(), Split::Train);
        let names = ["a".to_string(), "b".to_string()];
        assert!(Dataset::new(vec![s.clone(), s], splits, names).is_err());
    }
}
