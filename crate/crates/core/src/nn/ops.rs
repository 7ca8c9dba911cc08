//! Planar (channels-first) convolution and pooling kernels.

use super::scalar::Scalar;

/// Geometry of a square-kernel, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// "Same"-style padding of `kernel / 2`.
    pub fn new(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Self { in_c, in_h, in_w, out_c, kernel, stride, pad, out_h, out_w }
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    /// Output positions `o` along one axis whose input tap `o*stride + k - pad` is in range.
    #[inline]
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= in_len - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = in_len as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

pub fn conv_forward<S: Scalar>(g: &ConvGeom, input: &[S], weight: &[f64], bias: &[f64], out: &mut [S]) {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    for oc in 0..g.out_c {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        let b = S::from_f64(bias[oc]);
        plane.iter_mut().for_each(|v| *v = b);
        for ic in 0..g.in_c {
            let src = &input[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let w = weight[((oc * g.in_c + ic) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx, iw, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &src[iy * iw..(iy + 1) * iw];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let start = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            for (o, &x) in row_out[ox_lo..ox_hi].iter_mut().zip(&row_in[start..start + n]) {
                                *o += x * w;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += row_in[ox * g.stride + kx - g.pad] * w;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for a convolution given the upstream gradient `dout`.
pub fn conv_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[f64],
    dout: &[S],
    mut dweight: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
    mut dinput: Option<&mut [S]>,
) {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    if let Some(db) = dbias {
        for oc in 0..g.out_c {
            let mut acc = S::default();
            for &d in &dout[oc * oh * ow..(oc + 1) * oh * ow] {
                acc += d;
            }
            db[oc] += acc;
        }
    }
    for oc in 0..g.out_c {
        let dplane = &dout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..g.in_c {
            let src = &input[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let widx = ((oc * g.in_c + ic) * k + ky) * k + kx;
                    let w = weight[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, iw, ow);
                    if let Some(dw) = dweight.as_deref_mut() {
                        let mut acc = S::default();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_in = &src[iy * iw..(iy + 1) * iw];
                            let row_d = &dplane[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let start = ox_lo + kx - g.pad;
                                let n = ox_hi - ox_lo;
                                for (&d, &x) in row_d[ox_lo..ox_hi].iter().zip(&row_in[start..start + n]) {
                                    acc += d * x;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += row_d[ox] * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                    if let Some(di) = dinput.as_deref_mut() {
                        if w == 0.0 {
                            continue;
                        }
                        let dsrc = &mut di[ic * ih * iw..(ic + 1) * ih * iw];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_di = &mut dsrc[iy * iw..(iy + 1) * iw];
                            let row_d = &dplane[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let start = ox_lo + kx - g.pad;
                                let n = ox_hi - ox_lo;
                                for (x, &d) in row_di[start..start + n].iter_mut().zip(&row_d[ox_lo..ox_hi]) {
                                    *x += d * w;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_di[ox * g.stride + kx - g.pad] += row_d[ox] * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping `p × p` max pooling. Returns the pooled planes and the
/// flat input index each output came from.
pub fn max_pool<S: Scalar>(input: &[S], c: usize, h: usize, w: usize, p: usize) -> (Vec<S>, Vec<u32>) {
    let (oh, ow) = (h / p, w / p);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (oy * p) * w + ox * p;
                for dy in 0..p {
                    for dx in 0..p {
                        let idx = base + (oy * p + dy) * w + ox * p + dx;
                        if input[idx].re() > input[best].re() {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_c * g.out_h * g.out_w];
        for oc in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[oc];
                    for ic in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((oc * g.in_c + ic) * g.kernel + ky) * g.kernel + kx]
                                    * x[(ic * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_for_strides_and_kernels() {
        for &(k, s) in &[(1, 1), (3, 1), (3, 2), (5, 2), (3, 3)] {
            let g = ConvGeom::new(2, 7, 9, 3, k, s);
            let x = ramp(2 * 7 * 9, 0.1);
            let w = ramp(g.weight_len(), 0.05);
            let b = vec![0.1, -0.2, 0.3];
            let mut out = vec![0.0; 3 * g.out_h * g.out_w];
            conv_forward(&g, &x, &w, &b, &mut out);
            let reference = naive_conv(&g, &x, &w, &b);
            for (a, r) in out.iter().zip(&reference) {
                assert!((a - r).abs() < 1e-12, "k={k} s={s}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        for stride in [1, 2] {
            check_conv_backward(ConvGeom::new(2, 6, 5, 2, 3, stride));
        }
    }

    fn check_conv_backward(g: ConvGeom) {
        // <dout, conv(x)> is bilinear; check gradients by finite differences.
        let x = ramp(2 * 6 * 5, 0.1);
        let w = ramp(g.weight_len(), 0.07);
        let b = vec![0.0, 0.0];
        let dout = ramp(2 * g.out_h * g.out_w, 0.3);
        let objective = |x: &[f64], w: &[f64]| {
            let mut out = vec![0.0; 2 * g.out_h * g.out_w];
            conv_forward(&g, x, w, &b, &mut out);
            out.iter().zip(&dout).map(|(o, d)| o * d).sum::<f64>()
        };
        let mut dw = vec![0.0; w.len()];
        let mut dx = vec![0.0; x.len()];
        let mut db = vec![0.0; 2];
        conv_backward(&g, &x, &w, &dout, Some(&mut dw), Some(&mut db), Some(&mut dx));
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let x = vec![1.0, 3.0, 3.0, 0.0, 2.0, 2.0, 5.0, 1.0];
        let (out, arg) = max_pool(&x, 2, 2, 2, 2);
        assert_eq!(out, vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
