//! Fidelity and fusion-quality metrics: MSE, PSNR, SSIM, Q^AB/F and
//! pixel-domain VIF, plus dataset-level evaluation.
//!
//! Metrics work on single-channel [`Plane`]s in `f64`. Pipeline images
//! (`[-1, 1]` tensors) are mapped to the 8-bit range `[0, 255]` before
//! scoring so that PSNR peaks and the VIF noise floor have their usual
//! meaning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, luminance, DatasetManifest};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Contract(format!("{h}×{w} plane needs {} values, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Channel `c` of a `[C, H, W]` image in `[-1, 1]`, mapped to `[0, 255]`.
    pub fn channel_255(img: &Tensor<f32>, c: usize) -> Result<Self> {
        let (ch, h, w) = img.dims3()?;
        if c >= ch {
            return Err(Error::Contract(format!("channel {c} of a {ch}-channel image")));
        }
        let d = &img.data()[c * h * w..(c + 1) * h * w];
        Ok(Self {
            h,
            w,
            data: d.iter().map(|&v| to_255(v)).collect(),
        })
    }

    /// Luminance of a 1- or 3-channel image in `[-1, 1]`, mapped to `[0, 255]`.
    pub fn luminance_255(img: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = img.dims3()?;
        let d = img.data();
        let n = h * w;
        let data = match c {
            1 => d.iter().map(|&v| to_255(v)).collect(),
            3 => (0..n)
                .map(|i| luminance(to_255(d[i]), to_255(d[n + i]), to_255(d[2 * n + i])))
                .collect(),
            _ => return Err(Error::Contract(format!("expected 1 or 3 channels, got {c}"))),
        };
        Ok(Self { h, w, data })
    }
}

pub fn to_255(v: f32) -> f64 {
    (v as f64 + 1.0) * 127.5
}

fn same_shape(a: &Plane, b: &Plane) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Contract(format!(
            "image shapes differ: {}×{} vs {}×{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(())
}

pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Contract("mse of empty images".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("PSNR peak {peak} must be > 0")));
    }
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(a: &Plane, b: &Plane, peak: f64) -> Result<f64> {
    psnr_from_mse(mse(a, b)?, peak)
}

/// MSE over all channels of two `[C, H, W]` images in `[-1, 1]`, in 8-bit units.
pub fn mse_image(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.dims3()?;
    let mut total = 0.0;
    for ch in 0..c {
        total += mse(&Plane::channel_255(a, ch)?, &Plane::channel_255(b, ch)?)? * (h * w) as f64;
    }
    Ok(total / (c * h * w) as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalised 1-D Gaussian of odd length `n`.
fn gauss_1d(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let k: Vec<f64> = (0..n).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with `k`, keeping only fully covered positions.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|j| k[j] * p.at(y, x + j)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    Plane { h: oh, w: ow, data: out }
}

/// Same-size separable correlation with replicated borders.
fn filter_same(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * p.at(y, clamp(x as isize + j as isize - r, p.w)))
                .sum();
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    Plane { h: p.h, w: p.w, data: out }
}

fn zip(a: &Plane, b: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
    Plane {
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Mean SSIM over all valid 11×11 Gaussian windows; `peak` is the dynamic range.
pub fn ssim(a: &Plane, b: &Plane, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            a.h, a.w
        )));
    }
    let k = gauss_1d(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&zip(a, a, |x, y| x * y), &k);
    let bb = filter_valid(&zip(b, b, |x, y| x * y), &k);
    let ab = filter_valid(&zip(a, b, |x, y| x * y), &k);
    let n = mu_a.data.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// SSIM averaged over the channels of two images in `[-1, 1]` (8-bit range).
pub fn ssim_image(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, _, _) = a.dims3()?;
    let mut s = 0.0;
    for ch in 0..c {
        s += ssim(&Plane::channel_255(a, ch)?, &Plane::channel_255(b, ch)?, 255.0)?;
    }
    Ok(s / c as f64)
}

/// Sigmoid constants of the edge-preservation metric (strength, orientation).
pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;
/// Exponent of the gradient-magnitude weights.
pub const QABF_L: f64 = 1.0;

/// Sobel magnitude and orientation `atan(gy/gx) ∈ [−π/2, π/2]`, replicated borders.
fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut mag = vec![0.0; p.h * p.w];
    let mut ang = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            let v = |dy: isize, dx: isize| p.at(clamp(y as isize + dy, p.h), clamp(x as isize + dx, p.w));
            let gx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
            let gy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
            let i = y * p.w + x;
            mag[i] = (gx * gx + gy * gy).sqrt();
            ang[i] = if gx == 0.0 {
                if gy == 0.0 {
                    0.0
                } else {
                    std::f64::consts::FRAC_PI_2
                }
            } else {
                (gy / gx).atan()
            };
        }
    }
    (mag, ang)
}

/// Per-pixel preservation `Q^XF = Q_g·Q_α` of source `x` in fused `f`.
fn preservation(gx: f64, ax: f64, gf: f64, af: f64) -> f64 {
    let g = if gx == gf {
        1.0
    } else if gx > gf {
        gf / gx
    } else {
        gx / gf
    };
    let a = 1.0 - (ax - af).abs() / std::f64::consts::FRAC_PI_2;
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Gradient-based fusion metric with a flag set when both sources have
/// no gradient anywhere (the value is then defined as 0).
pub fn qabf_flagged(a: &Plane, b: &Plane, f: &Plane) -> Result<(f64, bool)> {
    same_shape(a, b)?;
    same_shape(a, f)?;
    let (ga, aa) = sobel(a);
    let (gb, ab) = sobel(b);
    let (gf, af) = sobel(f);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..ga.len() {
        let (wa, wb) = (ga[i].powf(QABF_L), gb[i].powf(QABF_L));
        num += preservation(ga[i], aa[i], gf[i], af[i]) * wa + preservation(gb[i], ab[i], gf[i], af[i]) * wb;
        den += wa + wb;
    }
    if den == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((num / den).clamp(0.0, 1.0), false))
}

pub fn qabf(a: &Plane, b: &Plane, f: &Plane) -> Result<f64> {
    Ok(qabf_flagged(a, b, f)?.0)
}

/// Channel noise variance of the VIF model (8-bit units).
pub const VIF_NOISE_VAR: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

/// Multi-scale pixel-domain VIF.
///
/// Four scales with Gaussian windows of size `2^(5−s)+1` and deviation
/// size/5; between scales both images are low-passed and decimated by 2.
/// Filtering keeps the image size with replicated borders, so small inputs
/// are accepted. A flat reference carries no information; the result is
/// then 1 when `dist` equals `ref` and 0 otherwise.
pub fn vif_pixel(reference: &Plane, dist: &Plane) -> Result<f64> {
    same_shape(reference, dist)?;
    if reference.data.is_empty() {
        return Err(Error::Contract("VIF of empty images".into()));
    }
    let mut r = reference.clone();
    let mut d = dist.clone();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let k = gauss_1d(n, n as f64 / 5.0);
        if scale > 1 {
            r = decimate(&filter_same(&r, &k));
            d = decimate(&filter_same(&d, &k));
        }
        let mu1 = filter_same(&r, &k);
        let mu2 = filter_same(&d, &k);
        let rr = filter_same(&zip(&r, &r, |x, y| x * y), &k);
        let dd = filter_same(&zip(&d, &d, |x, y| x * y), &k);
        let rd = filter_same(&zip(&r, &d, |x, y| x * y), &k);
        for i in 0..mu1.data.len() {
            let mut s1 = (rr.data[i] - mu1.data[i] * mu1.data[i]).max(0.0);
            let s2 = (dd.data[i] - mu2.data[i] * mu2.data[i]).max(0.0);
            let s12 = rd.data[i] - mu1.data[i] * mu2.data[i];
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(VIF_EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    if den <= 0.0 {
        return Ok(if reference.data == dist.data { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

fn decimate(p: &Plane) -> Plane {
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(p.at(2 * y, 2 * x));
        }
    }
    Plane { h, w, data }
}

pub const REPORT_FORMAT: &str = "fsdiff-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub qabf: f64,
    pub vif: f64,
}

/// Metrics of one fused image against its record's target and sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    #[serde(flatten)]
    pub values: MetricValues,
    /// Reserved; perceptual distance is not computed.
    pub lpips: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<RecordMetrics>,
    /// Records without a fused image.
    pub missing: Vec<String>,
    /// `None` when no record was scored.
    pub means: Option<MetricValues>,
}

/// Scores `fused` against the target and HR sources of one scene.
///
/// MSE/PSNR/SSIM compare RGB against the target; VIF compares luminance
/// against the target; Q^AB/F measures edge transfer from the HR visible
/// luminance and infrared into the fused luminance.
pub fn score(fused: &Tensor<f32>, target: &Tensor<f32>, vi: &Tensor<f32>, ir: &Tensor<f32>) -> Result<(MetricValues, bool)> {
    let m = mse_image(fused, target)?;
    let fl = Plane::luminance_255(fused)?;
    let (q, flat) = qabf_flagged(&Plane::luminance_255(vi)?, &Plane::luminance_255(ir)?, &fl)?;
    Ok((
        MetricValues {
            mse: m,
            psnr_db: psnr_from_mse(m, 255.0)?,
            ssim: ssim_image(fused, target)?,
            qabf: q,
            vif: vif_pixel(&Plane::luminance_255(target)?, &fl)?,
        },
        flat,
    ))
}

/// Arithmetic means of each metric.
pub fn mean_values(rows: &[MetricValues]) -> Option<MetricValues> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricValues) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(MetricValues {
        mse: avg(|v| v.mse),
        psnr_db: avg(|v| v.psnr_db),
        ssim: avg(|v| v.ssim),
        qabf: avg(|v| v.qabf),
        vif: avg(|v| v.vif),
    })
}

/// Fused image for `id` in `dir`: the `.f32t` sidecar when present, else the PNG.
pub fn fused_path(dir: &Path, id: &str) -> Option<PathBuf> {
    let side = dir.join(format!("{id}.{}", io::TENSOR_EXT));
    let png = dir.join(format!("{id}.png"));
    if side.is_file() {
        Some(side)
    } else if png.is_file() {
        Some(png)
    } else {
        None
    }
}

/// Scores every record that has a fused image in `fused_dir`.
pub fn evaluate_manifest(manifest: &DatasetManifest, fused_dir: &Path) -> Result<MetricReport> {
    let rows = crate::par::map(&manifest.records, |_, r| -> Result<Option<RecordMetrics>> {
        let Some(p) = fused_path(fused_dir, &r.id) else {
            return Ok(None);
        };
        let fused = io::read_image(&p)?;
        let target = data::load_image(&manifest.root, &r.fusion_gt)?;
        let vi = data::load_image(&manifest.root, &r.vi_hr)?;
        let ir = data::load_image(&manifest.root, &r.ir_hr)?;
        let (values, flat) = score(&fused, &target, &vi, &ir)
            .map_err(|e| Error::format(&p, e.to_string()))?;
        let warnings = if flat {
            vec!["sources have no gradients; qabf defined as 0".to_string()]
        } else {
            Vec::new()
        };
        Ok(Some(RecordMetrics {
            id: r.id.clone(),
            values,
            lpips: None,
            warnings,
        }))
    });
    let mut report = MetricReport::default();
    for (r, row) in manifest.records.iter().zip(rows) {
        match row? {
            Some(m) => report.records.push(m),
            None => report.missing.push(r.id.clone()),
        }
    }
    let vals: Vec<MetricValues> = report.records.iter().map(|r| r.values).collect();
    report.means = mean_values(&vals);
    Ok(report)
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    format: &'a str,
    version: u32,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    summary: bool,
    count: usize,
    missing: &'a [String],
    means: Option<MetricValues>,
    lpips: Option<f64>,
}

impl MetricReport {
    /// Header line, one line per record, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        let header = ReportHeader {
            format: REPORT_FORMAT,
            version: REPORT_VERSION,
        };
        data::write_json_line(&mut out, &header).expect("in-memory write");
        for r in &self.records {
            data::write_json_line(&mut out, r).expect("in-memory write");
        }
        let summary = ReportSummary {
            summary: true,
            count: self.records.len(),
            missing: &self.missing,
            means: self.means,
            lpips: None,
        };
        data::write_json_line(&mut out, &summary).expect("in-memory write");
        String::from_utf8(out).expect("json is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap()
    }

    fn textured(h: usize, w: usize) -> Plane {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                127.5 + 60.0 * (0.4 * x).sin() * (0.3 * y).cos() + 40.0 * (0.9 * x + 0.5 * y).sin()
            })
            .collect();
        Plane::new(h, w, data).unwrap()
    }

    #[test]
    fn mse_psnr_hand_values() {
        let a = Plane::constant(4, 4, 0.0);
        let b = Plane::constant(4, 4, 255.0);
        assert_eq!(mse(&a, &b).unwrap(), 65025.0);
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &b, 0.0).is_err());
        assert!(mse(&a, &Plane::constant(4, 5, 0.0)).is_err());
    }

    #[test]
    fn ssim_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 16, 16);
        assert!((ssim(&x, &x, 255.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Plane::constant(10, 10, 0.0), &Plane::constant(10, 10, 0.0), 255.0).is_err());
        let board = Plane::new(16, 16, (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect()).unwrap();
        let inv = Plane::new(16, 16, board.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&board, &inv, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn qabf_canonical_identity_and_constant() {
        let x = textured(24, 24);
        let q = qabf(&x, &x, &x).unwrap();
        let expect = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * 0.5).exp())
            * (QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * 0.2).exp()));
        assert!((q - expect).abs() < 1e-12);
        assert!((q - 0.974_80).abs() < 1e-4);
        let c = Plane::constant(24, 24, 90.0);
        assert!(qabf(&x, &x, &c).unwrap() < 1e-3);
        let (v, flat) = qabf_flagged(&c, &c, &x).unwrap();
        assert_eq!(v, 0.0);
        assert!(flat);
    }

    #[test]
    fn vif_fixed_points_and_monotonicity() {
        let x = textured(48, 48);
        assert!((vif_pixel(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let mut last = 1.0 + 1e-6;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let k = gauss_1d(2 * (3.0 * sigma as f64).ceil() as usize + 1, sigma);
            let b = filter_same(&x, &k);
            let v = vif_pixel(&x, &b).unwrap();
            assert!(v < last, "σ={sigma}: {v} ≥ {last}");
            last = v;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = random_plane(&mut rng, 48, 48);
        assert!(vif_pixel(&x, &noise).unwrap() < 0.1);
        let flat = Plane::constant(16, 16, 3.0);
        assert_eq!(vif_pixel(&flat, &flat).unwrap(), 1.0);
    }

    #[test]
    fn report_means_and_lines() {
        let rows = [
            MetricValues { mse: 1.0, psnr_db: 40.0, ssim: 0.5, qabf: 0.2, vif: 0.3 },
            MetricValues { mse: 3.0, psnr_db: 30.0, ssim: 0.7, qabf: 0.4, vif: 0.5 },
        ];
        let m = mean_values(&rows).unwrap();
        assert_eq!((m.mse, m.psnr_db), (2.0, 35.0));
        assert!(mean_values(&[]).is_none());
        let report = MetricReport {
            records: vec![RecordMetrics { id: "a".into(), values: rows[0], lpips: None, warnings: vec![] }],
            missing: vec!["b".into()],
            means: Some(rows[0]),
        };
        let text = report.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("\"version\":1"));
        assert!(lines[1].contains("\"lpips\":null"));
        assert!(lines[2].contains("\"missing\":[\"b\"]"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ranges_and_symmetry(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, f) = (random_plane(&mut rng, 16, 16), random_plane(&mut rng, 16, 16), random_plane(&mut rng, 16, 16));
            let s = ssim(&a, &b, 255.0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(s, ssim(&b, &a, 255.0).unwrap());
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            let q = qabf(&a, &b, &f).unwrap();
            prop_assert!((0.0..=1.0).contains(&q));
            prop_assert!((q - qabf(&b, &a, &f).unwrap()).abs() < 1e-12);
        }
    }
}
