//! Direct 2D cross-correlation, bilinear resampling and the scale-invariant
//! layer: steer, correlate at every scale, max-pool across scales.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::steering::{steer, CoefficientSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding; output has the input's size.
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// Discrete cross-correlation `out[y][x] = sum_ab k[a][b] * img[y + a - ry][x + b - rx]`
/// (`ry = rx = 0` for [`Padding::Valid`]).
pub fn xcorr2(image: &Array2<f64>, kernel: &Array2<f64>, padding: Padding) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    if kh == 0 || kw == 0 {
        return Err(Error::invalid("empty kernel"));
    }
    let img = image.as_standard_layout();
    let k = kernel.as_standard_layout();
    let img = img.as_slice().expect("standard layout");
    let k = k.as_slice().expect("standard layout");
    match padding {
        Padding::Same => {
            let mut out = vec![0.0; h * w];
            xcorr_same_acc(&mut out, img, h, w, k, kh, kw);
            Ok(Array2::from_shape_vec((h, w), out).expect("shape"))
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::invalid(format!(
                    "kernel {kh}x{kw} larger than image {h}x{w} in valid mode"
                )));
            }
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let mut out = vec![0.0; oh * ow];
            for y in 0..oh {
                let orow = &mut out[y * ow..(y + 1) * ow];
                for a in 0..kh {
                    let irow = &img[(y + a) * w..(y + a + 1) * w];
                    for b in 0..kw {
                        axpy(orow, k[a * kw + b], &irow[b..b + ow]);
                    }
                }
            }
            Ok(Array2::from_shape_vec((oh, ow), out).expect("shape"))
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Kernel taps `[lo, hi)` along one axis that land inside the image when the
/// kernel (radius `r`) is centred at `pos`.
#[inline]
fn kernel_window(k_len: usize, img_len: usize, pos: usize, r: isize) -> (usize, usize) {
    let lo = (r - pos as isize).max(0) as usize;
    let hi = (img_len as isize + r - pos as isize).clamp(0, k_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Accumulates a same-padded cross-correlation into `out` (row-major `h x w`).
pub(crate) fn xcorr_same_acc(out: &mut [f64], img: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) {
    let pad = kw / 2;
    let mut padded = Vec::new();
    pad_columns(img, h, w, pad, &mut padded);
    xcorr_same_acc_padded(out, &padded, pad, h, w, k, kh, kw);
}

/// Copies `img` into `dst` with `pad` zero columns on both sides of each row,
/// plus one spare column so even-width kernels stay in bounds.
pub(crate) fn pad_columns(img: &[f64], h: usize, w: usize, pad: usize, dst: &mut Vec<f64>) {
    let pw = w + 2 * pad + 1;
    dst.clear();
    dst.resize(h * pw, 0.0);
    for y in 0..h {
        dst[y * pw + pad..y * pw + pad + w].copy_from_slice(&img[y * w..(y + 1) * w]);
    }
}

const LANES: usize = 8;

/// Same as [`xcorr_same_acc`] on an image padded by [`pad_columns`] with
/// `pad >= kw / 2`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn xcorr_same_acc_padded(
    out: &mut [f64],
    padded: &[f64],
    pad: usize,
    h: usize,
    w: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
) {
    debug_assert!(pad >= kw / 2);
    let pw = w + 2 * pad + 1;
    let shift = pad - kw / 2;
    let ry = (kh / 2) as isize;
    let chunks = w / LANES;
    for y in 0..h {
        let (a0, a1) = kernel_window(kh, h, y, ry);
        let orow = &mut out[y * w..(y + 1) * w];
        for chunk in 0..chunks {
            let x = chunk * LANES;
            let mut acc = [0.0f64; LANES];
            for a in a0..a1 {
                let iy = (y as isize + a as isize - ry) as usize;
                let start = iy * pw + shift + x;
                let prow = &padded[start..start + kw - 1 + LANES];
                let krow = &k[a * kw..(a + 1) * kw];
                for (b, &kv) in krow.iter().enumerate() {
                    let src: &[f64; LANES] = prow[b..b + LANES].try_into().expect("lane slice");
                    for t in 0..LANES {
                        acc[t] += kv * src[t];
                    }
                }
            }
            for t in 0..LANES {
                orow[x + t] += acc[t];
            }
        }
        for x in chunks * LANES..w {
            let mut acc = 0.0;
            for a in a0..a1 {
                let iy = (y as isize + a as isize - ry) as usize;
                let start = iy * pw + shift + x;
                let krow = &k[a * kw..(a + 1) * kw];
                for (kv, v) in krow.iter().zip(&padded[start..start + kw]) {
                    acc += kv * v;
                }
            }
            orow[x] += acc;
        }
    }
}

/// Gradient contribution of a single output pixel `(y, x)` carrying `g`:
/// adds `g * patch` to the kernel gradient and, if `dimg` is given,
/// `g * kernel` to the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn xcorr_same_backprop_pixel(
    g: f64,
    y: usize,
    x: usize,
    img: &[f64],
    h: usize,
    w: usize,
    k: &[f64],
    dk: &mut [f64],
    dimg: Option<&mut [f64]>,
    kh: usize,
    kw: usize,
) {
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let (a0, a1) = kernel_window(kh, h, y, ry);
    let (b0, b1) = kernel_window(kw, w, x, rx);
    if a0 >= a1 || b0 >= b1 {
        return;
    }
    let col0 = (x as isize + b0 as isize - rx) as usize;
    let n = b1 - b0;
    match dimg {
        Some(dimg) => {
            for a in a0..a1 {
                let iy = (y as isize + a as isize - ry) as usize;
                let base = iy * w + col0;
                axpy(&mut dk[a * kw + b0..a * kw + b1], g, &img[base..base + n]);
                axpy(&mut dimg[base..base + n], g, &k[a * kw + b0..a * kw + b1]);
            }
        }
        None => {
            for a in a0..a1 {
                let iy = (y as isize + a as isize - ry) as usize;
                let base = iy * w + col0;
                axpy(&mut dk[a * kw + b0..a * kw + b1], g, &img[base..base + n]);
            }
        }
    }
}

/// Bilinear upsampling by an integer factor using pixel-centre alignment
/// (output pixel `o` samples source coordinate `(o + 0.5) / factor - 0.5`,
/// clamped at the borders).
pub fn upsample(image: &Array2<f64>, factor: usize) -> Array2<f64> {
    assert!(factor >= 1, "upsample factor must be at least 1");
    if factor == 1 {
        return image.clone();
    }
    let (h, w) = image.dim();
    let f = factor as f64;
    let coord = |o: usize, len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    Array2::from_shape_fn((h * factor, w * factor), |(r, c)| {
        let (r0, r1, fr) = coord(r, h);
        let (c0, c1, fc) = coord(c, w);
        let top = image[[r0, c0]] * (1.0 - fc) + image[[r0, c1]] * fc;
        let bottom = image[[r1, c0]] * (1.0 - fc) + image[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Responses of one output channel across a scale set.
#[derive(Debug, Clone)]
pub struct ScalePyramidResponse {
    /// One map per scale, in scale-list order.
    pub per_scale: Vec<Array2<f64>>,
    /// Elementwise maximum across scales.
    pub pooled: Array2<f64>,
    /// Index of the winning scale per pixel; ties go to the lowest index.
    pub argmax_scale: Array2<usize>,
}

/// Elementwise max over a non-empty stack of equally sized maps.
pub fn max_across_scales(per_scale: &[Array2<f64>]) -> (Array2<f64>, Array2<usize>) {
    let mut pooled = per_scale[0].clone();
    let mut argmax = Array2::zeros(pooled.dim());
    for (si, map) in per_scale.iter().enumerate().skip(1) {
        ndarray::Zip::from(&mut pooled)
            .and(&mut argmax)
            .and(map)
            .for_each(|p, a, &v| {
                if v > *p {
                    *p = v;
                    *a = si;
                }
            });
    }
    (pooled, argmax)
}

/// Scale-invariant layer forward pass. `coeffs[o][i]` holds the kernel from
/// input channel `i` to output channel `o`; per-scale responses are summed
/// over input channels before pooling across scales.
pub fn scale_invariant_forward(
    input: &[Array2<f64>],
    coeffs: &[Vec<CoefficientSet>],
    scales: &[f64],
    base_size: usize,
) -> Result<Vec<ScalePyramidResponse>> {
    if scales.is_empty() {
        return Err(Error::invalid("scale set is empty"));
    }
    if scales.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("scales must be ascending"));
    }
    if coeffs.is_empty() || input.is_empty() {
        return Err(Error::invalid("need at least one input and one output channel"));
    }
    let dim = input[0].dim();
    if input.iter().any(|m| m.dim() != dim) {
        return Err(Error::invalid("input channels differ in size"));
    }
    if coeffs.iter().any(|row| row.len() != input.len()) {
        return Err(Error::invalid("each output channel needs one coefficient set per input channel"));
    }
    coeffs
        .iter()
        .map(|row| {
            let per_scale = scales
                .iter()
                .map(|&s| {
                    let mut acc = Array2::zeros(dim);
                    for (x, c) in input.iter().zip(row) {
                        let kernel = steer(c, s, base_size)?;
                        acc += &xcorr2(x, &kernel.values, Padding::Same)?;
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()?;
            let (pooled, argmax_scale) = max_across_scales(&per_scale);
            Ok(ScalePyramidResponse {
                per_scale,
                pooled,
                argmax_scale,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::BasisSpec;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadruple-loop reference for same padding.
    fn xcorr_reference(img: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
        let (h, w) = img.dim();
        let (kh, kw) = k.dim();
        let (ry, rx) = ((kh / 2) as i64, (kw / 2) as i64);
        let mut out = Array2::zeros((h, w));
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for a in 0..kh as i64 {
                    for b in 0..kw as i64 {
                        let (iy, ix) = (y + a - ry, x + b - rx);
                        if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                            acc += k[[a as usize, b as usize]] * img[[iy as usize, ix as usize]];
                        }
                    }
                }
                out[[y as usize, x as usize]] = acc;
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_map(&mut rng, 6, 9);
        let mut k = Array2::zeros((3, 3));
        k[[1, 1]] = 1.0;
        assert_eq!(xcorr2(&img, &k, Padding::Same).unwrap(), img);
    }

    #[test]
    fn constant_image_interior() {
        let img = Array2::from_elem((8, 8), 2.5);
        let k = array![[1.0, 2.0, 0.5], [-1.0, 0.25, 3.0], [0.0, 1.0, 1.0]];
        let out = xcorr2(&img, &k, Padding::Same).unwrap();
        let expect = 2.5 * k.sum();
        for y in 1..7 {
            for x in 1..7 {
                assert!((out[[y, x]] - expect).abs() < 1e-12);
            }
        }
        let valid = xcorr2(&img, &k, Padding::Valid).unwrap();
        assert_eq!(valid.dim(), (6, 6));
        assert!(valid.iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(h, w, kh, kw) in &[(5, 5, 3, 3), (7, 4, 5, 3), (4, 4, 9, 9), (6, 11, 1, 7)] {
            let img = random_map(&mut rng, h, w);
            let k = random_map(&mut rng, kh, kw);
            let got = xcorr2(&img, &k, Padding::Same).unwrap();
            let want = xcorr_reference(&img, &k);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn valid_rejects_large_kernel() {
        let img = Array2::zeros((3, 3));
        let k = Array2::zeros((5, 5));
        assert!(matches!(xcorr2(&img, &k, Padding::Valid), Err(Error::InvalidArgument(_))));
        assert!(xcorr2(&img, &k, Padding::Same).is_ok());
    }

    #[test]
    fn backprop_pixel_matches_dense_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, kh, kw) = (6, 7, 5, 5);
        let img = random_map(&mut rng, h, w);
        let k = random_map(&mut rng, kh, kw);
        let dout = random_map(&mut rng, h, w);
        let mut dk = vec![0.0; kh * kw];
        let mut dimg = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                xcorr_same_backprop_pixel(
                    dout[[y, x]],
                    y,
                    x,
                    img.as_slice().unwrap(),
                    h,
                    w,
                    k.as_slice().unwrap(),
                    &mut dk,
                    Some(&mut dimg),
                    kh,
                    kw,
                );
            }
        }
        // <dout, xcorr(img, k)> is bilinear: d/dk and d/dimg by perturbation.
        let f = |img: &Array2<f64>, k: &Array2<f64>| (xcorr_reference(img, k) * &dout).sum();
        let eps = 1e-6;
        for idx in [0, 7, 12, 24] {
            let (a, b) = (idx / kw, idx % kw);
            let mut kp = k.clone();
            kp[[a, b]] += eps;
            let mut km = k.clone();
            km[[a, b]] -= eps;
            let fd = (f(&img, &kp) - f(&img, &km)) / (2.0 * eps);
            assert!((fd - dk[idx]).abs() < 1e-7);
        }
        for idx in [0, 10, 20, 41] {
            let (y, x) = (idx / w, idx % w);
            let mut ip = img.clone();
            ip[[y, x]] += eps;
            let mut im = img.clone();
            im[[y, x]] -= eps;
            let fd = (f(&ip, &k) - f(&im, &k)) / (2.0 * eps);
            assert!((fd - dimg[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_identity_constant_and_ramp() {
        let img = array![[0.0, 1.0], [0.0, 1.0]];
        assert_eq!(upsample(&img, 1), img);
        let c = Array2::from_elem((3, 2), 0.7);
        let up = upsample(&c, 3);
        assert_eq!(up.dim(), (9, 6));
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-15));
        // Pixel-centre alignment: source columns sampled at -0.25, 0.25, 0.75, 1.25.
        let up = upsample(&img, 2);
        for r in 0..4 {
            let row: Vec<f64> = up.row(r).to_vec();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn single_and_duplicate_scales() {
        let spec = BasisSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coeffs = vec![vec![CoefficientSet::random(&spec, 0.2, &mut rng)]];
        let img = vec![random_map(&mut rng, 12, 12)];
        let single = scale_invariant_forward(&img, &coeffs, &[1.0], 7).unwrap();
        let kernel = steer(&coeffs[0][0], 1.0, 7).unwrap();
        let plain = xcorr2(&img[0], &kernel.values, Padding::Same).unwrap();
        assert_eq!(single[0].pooled, plain);
        assert!(single[0].argmax_scale.iter().all(|&a| a == 0));

        let dup = scale_invariant_forward(&img, &coeffs, &[1.0, 1.0], 7).unwrap();
        assert_eq!(dup[0].pooled, single[0].pooled);
        assert!(dup[0].argmax_scale.iter().all(|&a| a == 0));
    }

    #[test]
    fn pooled_and_argmax_consistent() {
        let spec = BasisSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let coeffs: Vec<Vec<CoefficientSet>> = (0..2)
            .map(|_| (0..2).map(|_| CoefficientSet::random(&spec, 0.2, &mut rng)).collect())
            .collect();
        let img = vec![random_map(&mut rng, 10, 10), random_map(&mut rng, 10, 10)];
        let scales = [1.0, 1.3, 1.8];
        let out = scale_invariant_forward(&img, &coeffs, &scales, 5).unwrap();
        for r in &out {
            for ((p, &a), idx) in r.pooled.iter().zip(r.argmax_scale.iter()).zip(r.pooled.indexed_iter().map(|(i, _)| i)) {
                assert_eq!(*p, r.per_scale[a][idx]);
                for m in &r.per_scale {
                    assert!(*p >= m[idx]);
                }
            }
        }
        // Adding a scale never lowers a pooled value.
        let more = scale_invariant_forward(&img, &coeffs, &[1.0, 1.3, 1.5, 1.8], 5).unwrap();
        for (a, b) in out.iter().zip(&more) {
            assert!(a.pooled.iter().zip(b.pooled.iter()).all(|(x, y)| y >= x));
        }
    }

    #[test]
    fn rejects_bad_scale_lists() {
        let spec = BasisSpec::default();
        let coeffs = vec![vec![CoefficientSet::zeros(&spec)]];
        let img = vec![Array2::zeros((5, 5))];
        assert!(scale_invariant_forward(&img, &coeffs, &[], 7).is_err());
        assert!(scale_invariant_forward(&img, &coeffs, &[1.5, 1.0], 7).is_err());
    }
}
