//! Synthetic visible/infrared scenes with an exact fusion target, the
//! degradation pipeline, and on-disk datasets.
//!
//! A scene is a band-limited colour texture (visible) plus a set of elliptic
//! warm targets. The visible image shows the targets only faintly; the
//! infrared image shows them at full intensity over a flat cold background
//! and carries no texture. The fusion target picks, per pixel, whichever
//! source is brighter in luminance.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::resample;
use crate::tensor::Tensor;

/// Infrared background level.
pub const IR_BACKGROUND: f64 = -0.8;
/// Range of the Gaussian blur applied to a "blurred" modality.
pub const BLUR_SIGMA_RANGE: (f64, f64) = (2.0, 4.0);
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT: &str = "fsdiff-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const GENERATOR: &str = "fsdiff-scenes/1";

const TEXTURE_WAVES: usize = 6;
const TEXTURE_AMPLITUDE: f64 = 0.3;
const VI_BASE: f64 = -0.1;
const VI_BLOB_GAIN: f64 = 0.15;
const EDGE_WIDTH_PX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clarity {
    Clear,
    Blur,
}

impl Clarity {
    pub fn from_sigma(sigma: f64) -> Self {
        if sigma > 0.0 {
            Clarity::Blur
        } else {
            Clarity::Clear
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    /// Texture frequency band in cycles per pixel.
    pub texture_band: (f64, f64),
    pub blob_intensity: (f64, f64),
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize, blobs: usize) -> Self {
        Self {
            seed,
            height,
            width,
            blobs,
            texture_band: (0.03, 0.10),
            blob_intensity: (0.5, 1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "scene dims {}×{} must be positive multiples of 8",
                self.height, self.width
            )));
        }
        let (f0, f1) = self.texture_band;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 0.5) {
            return Err(Error::Config(format!("texture band {:?} outside (0, 0.5]", self.texture_band)));
        }
        let (i0, i1) = self.blob_intensity;
        if !(IR_BACKGROUND < i0 && i0 <= i1 && i1 <= 1.0) {
            return Err(Error::Config(format!("blob intensity {:?} outside (−0.8, 1]", self.blob_intensity)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`
    pub vi: Tensor<f32>,
    /// `[1, H, W]`
    pub ir: Tensor<f32>,
    /// `[3, H, W]`
    pub fusion_gt: Tensor<f32>,
}

/// Rec. 601 luma weights.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    /// Coverage in `[0, 1]` with a linear ramp about `EDGE_WIDTH_PX` wide.
    fn mask(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.ax;
        let v = (-dx * self.sin + dy * self.cos) / self.ay;
        let r = (u * u + v * v).sqrt();
        let dist = (r - 1.0) * self.ax.min(self.ay);
        (0.5 - dist / EDGE_WIDTH_PX).clamp(0.0, 1.0)
    }
}

/// Renders the visible/infrared pair and its fusion target.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let waves: Vec<(f64, f64, f64, f64)> = (0..TEXTURE_WAVES)
        .map(|_| {
            let f = rng.gen_range(spec.texture_band.0..=spec.texture_band.1);
            let th = rng.gen_range(0.0..PI);
            let ph = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.5..1.0);
            (2.0 * PI * f * th.cos(), 2.0 * PI * f * th.sin(), ph, amp)
        })
        .collect();
    let norm = (waves.iter().map(|w| w.3 * w.3).sum::<f64>() / 2.0).sqrt();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.7..1.0));
    let offset: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));

    let side = h.min(w) as f64;
    let blobs: Vec<Ellipse> = (0..spec.blobs)
        .map(|_| {
            let th: f64 = rng.gen_range(0.0..PI);
            Ellipse {
                cx: rng.gen_range(0.15..0.85) * w as f64,
                cy: rng.gen_range(0.15..0.85) * h as f64,
                ax: rng.gen_range(0.06..0.18) * side,
                ay: rng.gen_range(0.06..0.18) * side,
                cos: th.cos(),
                sin: th.sin(),
                intensity: rng.gen_range(spec.blob_intensity.0..=spec.blob_intensity.1),
            }
        })
        .collect();

    let plane = h * w;
    let mut vi = vec![0f32; 3 * plane];
    let mut ir = vec![0f32; plane];
    let mut gt = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).cos())
                .sum::<f64>()
                / norm;
            let t = t.tanh();
            let mut cover = 0.0f64;
            let mut heat = IR_BACKGROUND;
            for b in &blobs {
                let m = b.mask(px, py);
                cover = cover.max(m);
                heat = heat.max(IR_BACKGROUND + (b.intensity - IR_BACKGROUND) * m);
            }
            let rgb: [f64; 3] = std::array::from_fn(|c| {
                VI_BASE + offset[c] + TEXTURE_AMPLITUDE * tint[c] * t + VI_BLOB_GAIN * cover
            });
            let i = y * w + x;
            for c in 0..3 {
                vi[c * plane + i] = rgb[c] as f32;
            }
            ir[i] = heat as f32;
            // decide on the stored f32 values so the rule holds exactly on disk
            let (r, g, b) = (vi[i] as f64, vi[plane + i] as f64, vi[2 * plane + i] as f64);
            let from_vi = luminance(r, g, b) >= ir[i] as f64;
            for c in 0..3 {
                gt[c * plane + i] = if from_vi { vi[c * plane + i] } else { ir[i] };
            }
        }
    }
    Ok(Scene {
        vi: Tensor::from_vec(&[3, h, w], vi)?,
        ir: Tensor::from_vec(&[1, h, w], ir)?,
        fusion_gt: Tensor::from_vec(&[3, h, w], gt)?,
    })
}

/// Optional Gaussian blur, then anti-aliased bicubic reduction by `scale`.
pub fn degrade(img: &Tensor<f32>, scale: usize, blur_sigma: f64) -> Result<Tensor<f32>> {
    let (_, h, w) = img.dims3()?;
    if !resample::SCALES.contains(&scale) || h % scale != 0 || w % scale != 0 {
        return Err(Error::Contract(format!(
            "{h}×{w} image cannot be reduced by scale {scale}"
        )));
    }
    let blurred = resample::gaussian_blur(img, blur_sigma)?;
    resample::downsample(&blurred, scale)
}

pub use resample::upsample_bicubic;

/// Per-pair probabilities of which modality gets blurred.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurPolicy {
    pub vi_only: f64,
    pub ir_only: f64,
    pub both: f64,
    pub none: f64,
}

impl BlurPolicy {
    pub fn fixed(vi: bool, ir: bool) -> Self {
        let b = |on: bool| if on { 1.0 } else { 0.0 };
        Self {
            vi_only: b(vi && !ir),
            ir_only: b(ir && !vi),
            both: b(vi && ir),
            none: b(!vi && !ir),
        }
    }

    /// `none | vi | ir | both | mixed | mixed:VI,IR,BOTH,NONE`.
    pub fn parse(s: &str) -> Result<Self> {
        let p = match s {
            "none" => Self::fixed(false, false),
            "vi" => Self::fixed(true, false),
            "ir" => Self::fixed(false, true),
            "both" => Self::fixed(true, true),
            "mixed" => Self {
                vi_only: 0.25,
                ir_only: 0.25,
                both: 0.25,
                none: 0.25,
            },
            _ => {
                let rest = s
                    .strip_prefix("mixed:")
                    .ok_or_else(|| Error::Config(format!("unknown blur policy {s:?}")))?;
                let v: Vec<f64> = rest
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("blur policy {s:?}: {e}")))?;
                let [vi_only, ir_only, both, none] = v[..] else {
                    return Err(Error::Config(format!("blur policy {s:?} needs four weights")));
                };
                Self {
                    vi_only,
                    ir_only,
                    both,
                    none,
                }
            }
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let w = [self.vi_only, self.ir_only, self.both, self.none];
        let sum: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("blur policy weights {w:?} must be ≥ 0 and sum to 1")));
        }
        Ok(())
    }

    /// `(blur vi, blur ir)` for one pair.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (bool, bool) {
        let u: f64 = rng.gen();
        if u < self.vi_only {
            (true, false)
        } else if u < self.vi_only + self.ir_only {
            (false, true)
        } else if u < self.vi_only + self.ir_only + self.both {
            (true, true)
        } else {
            (false, false)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub seed: u64,
    pub scale: usize,
    pub hr_size: [usize; 2],
    pub blur_policy: BlurPolicy,
    pub count: usize,
}

/// One scene; paths are relative to the dataset directory and point at
/// PNGs, each with a lossless `.f32t` sidecar next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub scene_seed: u64,
    pub blobs: usize,
    pub vi_hr: String,
    pub ir_hr: String,
    pub fusion_gt: String,
    pub vi_lr: String,
    pub ir_lr: String,
    pub scale: usize,
    pub vi_clarity: Clarity,
    pub ir_clarity: Clarity,
    pub vi_blur_sigma: f64,
    pub ir_blur_sigma: f64,
}

impl SceneRecord {
    fn paths(&self) -> [&str; 5] {
        [&self.vi_hr, &self.ir_hr, &self.fusion_gt, &self.vi_lr, &self.ir_lr]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<SceneRecord>,
}

/// Images of one record, read losslessly when sidecars exist.
#[derive(Clone, Debug)]
pub struct SceneImages {
    pub vi_hr: Tensor<f32>,
    pub ir_hr: Tensor<f32>,
    pub fusion_gt: Tensor<f32>,
    pub vi_lr: Tensor<f32>,
    pub ir_lr: Tensor<f32>,
}

/// Prefers the float sidecar of `rel` under `root`.
pub fn load_image(root: &Path, rel: &str) -> Result<Tensor<f32>> {
    let p = root.join(rel);
    let side = io::sidecar_path(&p);
    if side.exists() {
        io::read_image(&side)
    } else {
        io::read_image(&p)
    }
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let parse_err = |n: usize, e: serde_json::Error| Error::format(&path, format!("line {}: {e}", n + 1));
        let (n, first) = lines
            .next()
            .ok_or_else(|| Error::format(&path, "empty manifest"))?;
        let first = first.map_err(|e| Error::io(&path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| parse_err(n, e))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest {} v{}", header.format, header.version),
            ));
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| parse_err(n, e))?);
        }
        if records.len() != header.count {
            return Err(Error::format(
                &path,
                format!("header announces {} records, found {}", header.count, records.len()),
            ));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            header,
            records,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serialises");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self) -> Result<()> {
        io::write_atomic(&self.root.join(MANIFEST_FILE), self.to_jsonl().as_bytes())
    }

    /// Checks that every referenced file exists and clarity flags match sigmas.
    pub fn validate(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        for r in &self.records {
            for rel in r.paths() {
                if !self.root.join(rel).is_file() {
                    return Err(Error::format(&path, format!("{}: missing {rel}", r.id)));
                }
            }
            if r.vi_clarity != Clarity::from_sigma(r.vi_blur_sigma)
                || r.ir_clarity != Clarity::from_sigma(r.ir_blur_sigma)
            {
                return Err(Error::format(&path, format!("{}: clarity flags disagree with blur sigma", r.id)));
            }
        }
        Ok(())
    }

    pub fn load_images(&self, r: &SceneRecord) -> Result<SceneImages> {
        Ok(SceneImages {
            vi_hr: load_image(&self.root, &r.vi_hr)?,
            ir_hr: load_image(&self.root, &r.ir_hr)?,
            fusion_gt: load_image(&self.root, &r.fusion_gt)?,
            vi_lr: load_image(&self.root, &r.vi_lr)?,
            ir_lr: load_image(&self.root, &r.ir_lr)?,
        })
    }
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub scale: usize,
    pub hr_size: usize,
    pub policy: BlurPolicy,
    pub seed: u64,
    /// Inclusive range for the number of targets per scene.
    pub blobs: (usize, usize),
}

impl DatasetSpec {
    pub fn new(scenes: usize, scale: usize, policy: BlurPolicy, seed: u64) -> Self {
        Self {
            scenes,
            scale,
            hr_size: 64,
            policy,
            seed,
            blobs: (1, 4),
        }
    }
}

/// Everything drawn for one record before rendering.
#[derive(Clone, Debug)]
struct Plan {
    scene: SceneSpec,
    vi_sigma: f64,
    ir_sigma: f64,
}

fn plan(spec: &DatasetSpec) -> Vec<Plan> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.scenes)
        .map(|_| {
            let seed = rng.gen();
            let k = rng.gen_range(spec.blobs.0..=spec.blobs.1);
            let (bv, bi) = spec.policy.draw(&mut rng);
            let mut sigma = |on: bool| {
                let s = rng.gen_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1);
                if on {
                    s
                } else {
                    0.0
                }
            };
            let vi_sigma = sigma(bv);
            let ir_sigma = sigma(bi);
            Plan {
                scene: SceneSpec::new(seed, spec.hr_size, spec.hr_size, k),
                vi_sigma,
                ir_sigma,
            }
        })
        .collect()
}

fn write_image(root: &Path, rel: &str, img: &Tensor<f32>) -> Result<()> {
    let p = root.join(rel);
    io::write_png(&p, img)?;
    io::write_tensor(&io::sidecar_path(&p), img)
}

/// Renders, degrades and writes `spec.scenes` records plus the manifest.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if !resample::SCALES.contains(&spec.scale) || spec.hr_size % spec.scale != 0 {
        return Err(Error::Config(format!(
            "HR size {} cannot be reduced by scale {}",
            spec.hr_size, spec.scale
        )));
    }
    if spec.blobs.0 > spec.blobs.1 {
        return Err(Error::Config("blob range is empty".into()));
    }
    spec.policy.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let plans = plan(spec);
    let results = crate::par::map(&plans, |i, p| -> Result<SceneRecord> {
        let id = format!("scene_{i:05}");
        let scene = render_scene(&p.scene)?;
        let vi_lr = degrade(&scene.vi, spec.scale, p.vi_sigma)?;
        let ir_lr = degrade(&scene.ir, spec.scale, p.ir_sigma)?;
        let rec = SceneRecord {
            vi_hr: format!("vi_hr/{id}.png"),
            ir_hr: format!("ir_hr/{id}.png"),
            fusion_gt: format!("fusion_gt/{id}.png"),
            vi_lr: format!("vi_lr/{id}.png"),
            ir_lr: format!("ir_lr/{id}.png"),
            id,
            scene_seed: p.scene.seed,
            blobs: p.scene.blobs,
            scale: spec.scale,
            vi_clarity: Clarity::from_sigma(p.vi_sigma),
            ir_clarity: Clarity::from_sigma(p.ir_sigma),
            vi_blur_sigma: p.vi_sigma,
            ir_blur_sigma: p.ir_sigma,
        };
        write_image(out_dir, &rec.vi_hr, &scene.vi)?;
        write_image(out_dir, &rec.ir_hr, &scene.ir)?;
        write_image(out_dir, &rec.fusion_gt, &scene.fusion_gt)?;
        write_image(out_dir, &rec.vi_lr, &vi_lr)?;
        write_image(out_dir, &rec.ir_lr, &ir_lr)?;
        Ok(rec)
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            generator: GENERATOR.into(),
            seed: spec.seed,
            scale: spec.scale,
            hr_size: [spec.hr_size, spec.hr_size],
            blur_policy: spec.policy,
            count: records.len(),
        },
        records,
    };
    manifest.save()?;
    Ok(manifest)
}

/// A clear and a blurred view of the same image, both at HR size after the
/// LR round trip (degrade, then bicubic upsampling).
#[derive(Clone, Debug)]
pub struct ClarityPair {
    pub clear: Tensor<f32>,
    pub blurred: Tensor<f32>,
    pub sigma: f64,
}

/// Pairs for clarity pretraining; modalities alternate VI, IR.
pub fn clarity_pairs(n: usize, scale: usize, hr_size: usize, seed: u64) -> Result<Vec<ClarityPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<(SceneSpec, f64)> = (0..n)
        .map(|_| {
            let s = SceneSpec::new(rng.gen(), hr_size, hr_size, rng.gen_range(1..=4));
            (s, rng.gen_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1))
        })
        .collect();
    crate::par::map(&jobs, |i, (spec, sigma)| {
        let scene = render_scene(spec)?;
        let img = if i % 2 == 0 { scene.vi } else { scene.ir };
        let view = |s: f64| upsample_bicubic(&degrade(&img, scale, s)?, scale);
        Ok(ClarityPair {
            clear: view(0.0)?,
            blurred: view(*sigma)?,
            sigma: *sigma,
        })
    })
    .into_iter()
    .collect()
}

impl std::fmt::Display for Clarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Clarity::Clear => "clear",
            Clarity::Blur => "blur",
        })
    }
}

/// Appends one JSON line to `w`.
pub fn write_json_line<W: Write, S: Serialize>(w: &mut W, v: &S) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")
}
