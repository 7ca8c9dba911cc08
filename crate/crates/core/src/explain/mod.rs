//! Saliency maps: GradCAM for any conv model and hard selections from the
//! bounded-logit attention (BLA) module.

mod bla;
mod gradcam;

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

pub use bla::{bla_attach, bla_deletion_effect, bla_explain, bla_finetune, bla_selection, DeletionEffect};
pub use gradcam::gradcam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradcam,
    Bla,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gradcam => "gradcam",
            Method::Bla => "bla",
        }
    }
}

/// Non-negative per-pixel attribution at input resolution, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub target_class: usize,
    pub method: Method,
    /// Maximum of the raw map before normalisation (0 for an all-zero map).
    pub normalization_max: f64,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, target_class: usize, method: Method) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Validation(format!(
                "saliency has {} values for a {height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("saliency values must be finite and non-negative".into()));
        }
        let normalization_max = values.iter().cloned().fold(0.0, f64::max);
        Ok(Self { height, width, values, target_class, method, normalization_max })
    }

    /// BLA maps are already binary and skip quantile thresholding.
    pub fn is_hard(&self) -> bool {
        self.method == Method::Bla
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Grey-scale rendering with values scaled by 255 (maps are in [0, 1]).
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize);
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    /// Writes `<stem>.png` and a `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.to_gray().save(&png).map_err(|e| Error::image(&png, e))?;
        let sidecar = Sidecar {
            method: self.method,
            target_class: self.target_class,
            normalization_max: self.normalization_max,
        };
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    method: Method,
    target_class: usize,
    normalization_max: f64,
}

/// Piecewise-linear blue→cyan→yellow→red ramp.
fn heat(v: f64) -> [f64; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.05, 0.05, 0.45]),
        (0.3, [0.0, 0.55, 0.85]),
        (0.55, [0.3, 0.85, 0.4]),
        (0.8, [0.98, 0.85, 0.1]),
        (1.0, [0.85, 0.1, 0.05]),
    ];
    let v = v.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + t * (cb[i] - ca[i]));
        }
    }
    STOPS[4].1
}

/// Alpha-blends a heatmap of `map` over `image`.
pub fn render_overlay(image: &Image, map: &SaliencyMap, alpha: f64) -> Result<RgbImage> {
    if image.height() != map.height || image.width() != map.width {
        return Err(Error::Validation("saliency and image sizes differ".into()));
    }
    let alpha = alpha.clamp(0.0, 1.0);
    Ok(RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let h = heat(map.get(y, x));
        let px = [0, 1, 2].map(|c| {
            let base = image.get(c.min(image.channels() - 1), y, x) as f64;
            (((1.0 - alpha) * base + alpha * h[c]) * 255.0).round().clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_and_misshaped_maps() {
        assert!(SaliencyMap::new(2, 2, vec![0.0, 1.0, -0.1, 0.0], 0, Method::Gradcam).is_err());
        assert!(SaliencyMap::new(2, 2, vec![0.0; 3], 0, Method::Gradcam).is_err());
    }

    #[test]
    fn save_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = SaliencyMap::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.0, 0.0], 1, Method::Gradcam).unwrap();
        m.save(dir.path(), "s0").unwrap();
        let png = image::open(dir.path().join("s0.png")).unwrap().to_luma8();
        assert_eq!(png.get_pixel(2, 0)[0], 255);
        assert_eq!(png.get_pixel(1, 0)[0], 128);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("s0.json")).unwrap()).unwrap();
        assert_eq!(side["method"], "gradcam");
        assert_eq!(side["target_class"], 1);
    }

    #[test]
    fn overlay_with_zero_alpha_is_the_image() {
        let img = Image::filled(2, 2, 3, 0.5);
        let m = SaliencyMap::new(2, 2, vec![1.0; 4], 0, Method::Bla).unwrap();
        let o = render_overlay(&img, &m, 0.0).unwrap();
        assert!(o.pixels().all(|p| p.0 == [128, 128, 128]));
    }
}
