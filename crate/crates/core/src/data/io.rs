//! Dataset root layout: `images/<id>.png`, `masks/<id>.png`, `labels.csv`
//! (`id,label`), and optionally `splits.csv` (`id,split`) and `classes.txt`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{assign_splits, Dataset, Image, Mask, Sample, Split, SplitFractions, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub resolution: usize,
    pub split_seed: u64,
    pub fractions: SplitFractions,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, split_seed: 0, fractions: SplitFractions::default() }
    }
}

pub fn load_dataset(root: &Path, split_seed: u64) -> Result<Dataset> {
    load_dataset_with(root, LoadOptions { split_seed, ..LoadOptions::default() })
}

fn ingestion(id: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Ingestion { id: id.into(), reason: reason.into() }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Reads `id,label` rows. Labels are either `0`/`1` or two distinct class
/// names (assigned indices in sorted order).
fn read_labels(root: &Path) -> Result<(BTreeMap<String, usize>, [String; 2])> {
    let path = root.join("labels.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    })?;
    let mut raw = Vec::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").trim().to_string();
        let label = row.get(1).unwrap_or("").trim().to_string();
        if id.is_empty() || label.is_empty() {
            return Err(Error::Validation(format!("{}: malformed row {:?}", path.display(), row)));
        }
        raw.push((id, label));
    }
    let distinct: BTreeSet<&str> = raw.iter().map(|(_, l)| l.as_str()).collect();
    let numeric = distinct.iter().all(|l| *l == "0" || *l == "1");
    let mut class_names = read_class_names(root)?;
    let names: Vec<String> = if numeric {
        vec!["0".into(), "1".into()]
    } else {
        if distinct.len() != 2 {
            return Err(Error::Validation(format!("expected two classes, found {}", distinct.len())));
        }
        let names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
        class_names.get_or_insert_with(|| [names[0].clone(), names[1].clone()]);
        names
    };
    let mut labels = BTreeMap::new();
    for (id, l) in raw {
        let idx = names.iter().position(|n| *n == l).expect("label collected above");
        if labels.insert(id.clone(), idx).is_some() {
            return Err(ingestion(id, "duplicate label row"));
        }
    }
    let class_names = class_names.unwrap_or_else(|| ["class_0".into(), "class_1".into()]);
    Ok((labels, class_names))
}

fn read_class_names(root: &Path) -> Result<Option<[String; 2]>> {
    let path = root.join("classes.txt");
    match fs::read_to_string(&path) {
        Ok(text) => {
            let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            if names.len() != 2 {
                return Err(Error::Validation(format!("{}: expected two class names", path.display())));
            }
            Ok(Some([names[0].to_string(), names[1].to_string()]))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_splits(root: &Path) -> Result<Option<BTreeMap<String, Split>>> {
    let path = root.join("splits.csv");
    if !path.exists() {
        return Ok(None);
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").trim().to_string();
        let split: Split = row.get(1).unwrap_or("").parse()?;
        out.insert(id, split);
    }
    Ok(Some(out))
}

/// Reads a single-channel mask PNG; nonzero marks the person. Exactly one
/// nonzero level is allowed.
pub fn read_mask_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let levels: BTreeSet<u8> = img.pixels().map(|p| p.0[0]).filter(|&v| v != 0).collect();
    if levels.len() > 1 {
        return Err(Error::Validation(format!(
            "{}: mask is not binary ({} distinct nonzero levels)",
            path.display(),
            levels.len()
        )));
    }
    Ok(img)
}

pub fn load_dataset_with(root: &Path, opts: LoadOptions) -> Result<Dataset> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let image_ids = png_stems(&images_dir)?;
    if image_ids.is_empty() {
        return Err(ingestion(root.display().to_string(), "dataset root contains no images"));
    }
    let mask_ids = png_stems(&masks_dir)?;
    let (labels, class_names) = read_labels(root)?;
    for id in &image_ids {
        if !mask_ids.contains(id) {
            return Err(ingestion(id, "missing mask"));
        }
        if !labels.contains_key(id) {
            return Err(ingestion(id, "missing label"));
        }
    }
    if let Some(id) = labels.keys().find(|id| !image_ids.contains(*id)) {
        return Err(ingestion(id, "label without image"));
    }
    let res = opts.resolution as u32;
    let mut samples = Vec::with_capacity(image_ids.len());
    for id in &image_ids {
        let ipath = images_dir.join(format!("{id}.png"));
        let mpath = masks_dir.join(format!("{id}.png"));
        let rgb = image::open(&ipath).map_err(|e| Error::image(&ipath, e))?.into_rgb8();
        let mask = read_mask_png(&mpath)?;
        if rgb.dimensions() != mask.dimensions() {
            return Err(Error::Validation(format!(
                "{id}: mask {:?} not aligned with image {:?}",
                mask.dimensions(),
                rgb.dimensions()
            )));
        }
        let rgb = if rgb.dimensions() == (res, res) { rgb } else { imageops::resize(&rgb, res, res, FilterType::Triangle) };
        let mask = if mask.dimensions() == (res, res) { mask } else { imageops::resize(&mask, res, res, FilterType::Nearest) };
        samples.push(Sample::new(id.clone(), rgb_to_image(&rgb), labels[id], person_to_relevance(&mask))?);
    }
    let splits = match read_splits(root)? {
        Some(s) => {
            for id in &image_ids {
                if !s.contains_key(id) {
                    return Err(ingestion(id, "missing split row"));
                }
            }
            s.into_iter().filter(|(id, _)| image_ids.contains(id)).collect()
        }
        None => {
            let items: Vec<(String, usize)> = samples.iter().map(|s| (s.id.clone(), s.label)).collect();
            assign_splits(&items, opts.split_seed, opts.fractions)
        }
    };
    Dataset::new(samples, splits, class_names)
}

fn rgb_to_image(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, 3, data).expect("u8 intensities are in range")
}

/// Person mask (nonzero = person) to relevance mask (1 = irrelevant).
fn person_to_relevance(mask: &GrayImage) -> Mask {
    let w = mask.width() as usize;
    Mask::from_fn(mask.height() as usize, w, |y, x| mask.get_pixel(x as u32, y as u32).0[0] == 0)
}

pub fn image_to_rgb(img: &Image) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let c = c.min(img.channels() - 1);
            (img.get(c, y as usize, x as usize) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes a binary mask as single-channel PNG (1 → 255).
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

fn create_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes a dataset in the root layout, including `splits.csv` and
/// `classes.txt` so a reload reproduces the same assignment.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = create_dir(&root.join("images"))?;
    let masks = create_dir(&root.join("masks"))?;
    let mut labels = csv::Writer::from_path(root.join("labels.csv"))?;
    labels.write_record(["id", "label"])?;
    let mut splits = csv::Writer::from_path(root.join("splits.csv"))?;
    splits.write_record(["id", "split"])?;
    for s in dataset.samples() {
        let ipath = images.join(format!("{}.png", s.id));
        image_to_rgb(&s.image).save(&ipath).map_err(|e| Error::image(&ipath, e))?;
        write_mask_png(&s.person_mask(), &masks.join(format!("{}.png", s.id)))?;
        labels.write_record([s.id.as_str(), &s.label.to_string()])?;
        splits.write_record([s.id.as_str(), dataset.split_of(&s.id).unwrap().as_str()])?;
    }
    labels.flush().map_err(|e| Error::io(root.join("labels.csv"), e))?;
    splits.flush().map_err(|e| Error::io(root.join("splits.csv"), e))?;
    let names = dataset.class_names();
    fs::write(root.join("classes.txt"), format!("{}\n{}\n", names[0], names[1]))
        .map_err(|e| Error::io(root.join("classes.txt"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_sample(root: &Path, id: &str, person: &[(u32, u32)], mask_level: u8) {
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb([(x * 60) as u8, (y * 60) as u8, 100]));
        img.save(root.join("images").join(format!("{id}.png"))).unwrap();
        let mut m = GrayImage::new(4, 4);
        for &(x, y) in person {
            m.put_pixel(x, y, Luma([mask_level]));
        }
        m.save(root.join("masks").join(format!("{id}.png"))).unwrap();
    }

    fn opts() -> LoadOptions {
        LoadOptions { resolution: 4, split_seed: 7, ..LoadOptions::default() }
    }

    #[test]
    fn loads_and_inverts_person_mask() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut labels = String::from("id,label\n");
        for i in 0..20 {
            write_sample(root, &format!("p{i:02}"), &[(1, 1), (2, 1)], 255);
            labels.push_str(&format!("p{i:02},{}\n", if i % 2 == 0 { "female" } else { "male" }));
        }
        fs::write(root.join("labels.csv"), labels).unwrap();
        let ds = load_dataset_with(root, opts()).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_names(), &["female".to_string(), "male".to_string()]);
        let s = ds.get("p00").unwrap();
        assert_eq!(s.label, 0);
        assert!(!s.relevance_mask.get(1, 1));
        assert!(!s.relevance_mask.get(1, 2));
        assert!(s.relevance_mask.get(0, 0));
        assert_eq!(s.relevance_mask.count_ones(), 14);
        assert!((s.image.get(0, 0, 1) - 60.0 / 255.0).abs() < 1e-6);
        let again = load_dataset_with(root, opts()).unwrap();
        assert_eq!(ds.split_assignment(), again.split_assignment());
    }

    #[test]
    fn empty_root_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("labels.csv"), "id,label\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), 7), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn missing_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_sample(root, "a", &[(0, 0)], 1);
        write_sample(root, "b", &[(0, 0)], 1);
        fs::remove_file(root.join("masks/b.png")).unwrap();
        fs::write(root.join("labels.csv"), "id,label\na,0\nb,1\n").unwrap();
        match load_dataset_with(root, opts()) {
            Err(Error::Ingestion { id, .. }) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_label_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_sample(root, "a", &[(0, 0)], 1);
        write_sample(root, "b", &[(0, 0)], 1);
        fs::write(root.join("labels.csv"), "id,label\na,0\n").unwrap();
        match load_dataset_with(root, opts()) {
            Err(Error::Ingestion { id, .. }) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_sample(root, "a", &[(0, 0)], 255);
        let mut m = GrayImage::new(4, 4);
        m.put_pixel(0, 0, Luma([128]));
        m.put_pixel(1, 0, Luma([255]));
        m.save(root.join("masks/a.png")).unwrap();
        fs::write(root.join("labels.csv"), "id,label\na,0\n").unwrap();
        assert!(matches!(load_dataset_with(root, opts()), Err(Error::Validation(_))));
    }
}
