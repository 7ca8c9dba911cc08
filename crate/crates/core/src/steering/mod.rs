//! Ways of turning relevance feedback into training signal: counterexample
//! augmentation, the input-gradient penalty, and their combination.

mod caipi;
mod rrr;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub use caipi::{apply_transform, caipi_counterexamples, Counterexample, Transform};
pub use rrr::{rrr_loss, Rrr, RrrWeights};

use crate::data::{image_to_rgb, write_mask_png, Mask, Sample};
use crate::error::{Error, Result};

/// Output of [`hybrid_prepare`]: counterexamples to append to the training
/// pool and the feedback masks the penalty should use, keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HybridBatch {
    pub counterexamples: Vec<Counterexample>,
    pub masks: BTreeMap<String, Mask>,
}

/// `k` counterexamples per selected sample, plus penalty masks for the
/// selected samples and every counterexample (which inherit their source
/// mask). `k = 0` degenerates to the plain penalty.
pub fn hybrid_prepare(
    selected: &[(&Sample, &Mask)],
    k: usize,
    iteration: usize,
    seed: u64,
) -> Result<HybridBatch> {
    let mut out = HybridBatch::default();
    for &(s, m) in selected {
        out.masks.insert(s.id.clone(), m.clone());
        for ce in caipi_counterexamples(s, m, k, iteration, seed)? {
            out.masks.insert(ce.sample.id.clone(), m.clone());
            out.counterexamples.push(ce);
        }
    }
    Ok(out)
}

/// Persists one iteration's counterexamples under
/// `<root>/counterexamples/iter<i>/` as `images/`, `masks/` (1 = person)
/// and `provenance.csv` (`id,source_id,transform,iteration`).
pub fn write_counterexamples(root: &Path, iteration: usize, ces: &[Counterexample]) -> Result<()> {
    let dir = root.join("counterexamples").join(format!("iter{iteration}"));
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut prov = csv::Writer::from_path(dir.join("provenance.csv"))?;
    prov.write_record(["id", "source_id", "transform", "iteration"])?;
    for ce in ces {
        let s = &ce.sample;
        let p = images.join(format!("{}.png", s.id));
        image_to_rgb(&s.image).save(&p).map_err(|e| Error::image(&p, e))?;
        write_mask_png(&s.person_mask(), &masks.join(format!("{}.png", s.id)))?;
        prov.write_record([s.id.as_str(), ce.source_id.as_str(), ce.transform.as_str(), &ce.iteration.to_string()])?;
    }
    prov.flush().map_err(|e| Error::io(dir.join("provenance.csv"), e))
}
