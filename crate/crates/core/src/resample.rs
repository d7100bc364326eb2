//! Separable image resampling on `[C, H, W]` tensors: Gaussian blur and
//! Catmull-Rom bicubic resizing with replicated borders.
//!
//! Output sample `i` of an axis resized by factor `s = in / out` reads the
//! input at `(i + 0.5)·s − 0.5` (pixel-centre alignment). Taps are computed
//! in `f64` and renormalised so every output position's weights sum to 1.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel parameter of the Catmull-Rom cubic.
pub const CUBIC_A: f64 = -0.5;

/// Scale factors accepted by [`downsample`] and [`upsample_bicubic`].
pub const SCALES: [usize; 4] = [1, 2, 4, 8];

/// Keys cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four input taps per output sample.
#[derive(Clone, Debug)]
struct Taps {
    idx: Vec<[usize; 4]>,
    w: Vec<[f64; 4]>,
}

fn cubic_taps(n_in: usize, n_out: usize) -> Taps {
    let s = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    let mut idx = Vec::with_capacity(n_out);
    let mut w = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let src = (i as f64 + 0.5) * s - 0.5;
        let base = src.floor();
        let frac = src - base;
        let base = base as isize;
        let mut ii = [0usize; 4];
        let mut ww = [0f64; 4];
        for k in 0..4 {
            let off = k as isize - 1;
            ii[k] = (base + off).clamp(0, last) as usize;
            ww[k] = cubic(frac - off as f64);
        }
        let sum: f64 = ww.iter().sum();
        for v in &mut ww {
            *v /= sum;
        }
        idx.push(ii);
        w.push(ww);
    }
    Taps { idx, w }
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = img.dims3()?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Contract(format!("empty image {:?}", img.shape())));
    }
    Ok((c, h, w))
}

/// Bicubic resize to `out_h × out_w`.
pub fn resize_bicubic(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Contract("resize to an empty image".into()));
    }
    let tx = cubic_taps(w, out_w);
    let ty = cubic_taps(h, out_h);
    let src = img.data();
    let mut out = vec![0f32; c * out_h * out_w];
    let mut rows = vec![0f64; h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for x in 0..out_w {
                let (ii, ww) = (&tx.idx[x], &tx.w[x]);
                rows[y * out_w + x] = (0..4).map(|k| ww[k] * line[ii[k]] as f64).sum();
            }
        }
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for y in 0..out_h {
            let (ii, ww) = (&ty.idx[y], &ty.w[y]);
            for x in 0..out_w {
                let v: f64 = (0..4).map(|k| ww[k] * rows[ii[k] * out_w + x]).sum();
                dst[y * out_w + x] = v as f32;
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Normalised Gaussian taps over `[-r, r]` with `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders; `sigma = 0` copies.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("blur sigma {sigma} must be ≥ 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut out = vec![0f32; c * h * w];
    let mut tmp = vec![0f64; h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn check_scale(scale: usize) -> Result<()> {
    if !SCALES.contains(&scale) {
        return Err(Error::Contract(format!("scale {scale} not in {SCALES:?}")));
    }
    Ok(())
}

/// Anti-aliased bicubic reduction: Gaussian prefilter with `σ = 0.5·scale`
/// (skipped at scale 1), then bicubic resize to `H/scale × W/scale`.
pub fn downsample(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    check_scale(scale)?;
    let (_, h, w) = check_image(img)?;
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::Contract(format!(
            "{h}×{w} image not divisible by scale {scale}"
        )));
    }
    if scale == 1 {
        return Ok(img.clone());
    }
    let pre = gaussian_blur(img, 0.5 * scale as f64)?;
    resize_bicubic(&pre, h / scale, w / scale)
}

/// Bicubic enlargement by `scale`.
pub fn upsample_bicubic(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    check_scale(scale)?;
    let (_, h, w) = check_image(img)?;
    if scale == 1 {
        return Ok(img.clone());
    }
    resize_bicubic(img, h * scale, w * scale)
}
