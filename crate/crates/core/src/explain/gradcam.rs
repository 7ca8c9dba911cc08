use super::{Method, SaliencyMap};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{Classifier, GradRequest};

/// Bilinear resize of one plane (half-pixel centres, edge clamped).
pub(crate) fn bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, n: usize| -> (usize, usize, f64) {
        let p = ((d as f64 + 0.5) * s as f64 / n as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, ty) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, tx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

pub(crate) fn check_target(model: &Classifier, image: &Image, target: usize) -> Result<()> {
    model.check_input(image.data().len())?;
    if target >= model.num_classes() {
        return Err(Error::Validation(format!("target class {target} out of range")));
    }
    Ok(())
}

/// Class activation map of `target` from the last conv layer.
///
/// Channel weights are spatial means of `∂logit_target/∂A_c`; the weighted
/// sum is rectified, bilinearly upsampled to the image and divided by its
/// maximum (all-zero maps are returned unnormalised).
pub fn gradcam(model: &Classifier, image: &Image, target: usize) -> Result<SaliencyMap> {
    if !model.arch().has_conv() {
        return Err(Error::Capability("GradCAM needs a model with a convolutional layer".into()));
    }
    check_target(model, image, target)?;
    let tape = model.forward(image.to_f64());
    let mut seed = vec![0.0; model.num_classes()];
    seed[target] = 1.0;
    let grads = model.backward(&tape, &seed, GradRequest::FEATURES, None).features.expect("feature gradient");
    let (fc, fh, fw) = model.arch().feature_shape();
    let hw = fh * fw;
    let feats = tape.features();
    let mut cam = vec![0.0; hw];
    for c in 0..fc {
        let alpha = grads[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (v, &f) in cam.iter_mut().zip(&feats[c * hw..(c + 1) * hw]) {
            *v += alpha * f;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (h, w) = (image.height(), image.width());
    let mut up = bilinear(&cam, fh, fw, h, w);
    let max = up.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v /= max);
    }
    let mut map = SaliencyMap::new(h, w, up, target, Method::Gradcam)?;
    map.normalization_max = max;
    Ok(map)
}
