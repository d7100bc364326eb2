//! Browser bindings: forward-noising preview, SSM kernel curves and a
//! degradation preview with fidelity scores.

use fsdiff::data::{degrade, render_scene, SceneSpec};
use fsdiff::metrics;
use fsdiff::resample::upsample_bicubic;
use fsdiff::schedule::{forward_marginal, NoiseSchedule};
use fsdiff::ssm::{conv_kernel, discretize, SsmParams};
use fsdiff::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

fn js(e: fsdiff::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[C, H, W]` in [−1, 1] to row-major RGBA bytes; one channel is shown as grey.
fn to_rgba(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = img.data();
    let byte = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let mut out = Vec::with_capacity(hw * 4);
    for i in 0..hw {
        for k in 0..3 {
            out.push(byte(d[(k % c) * hw + i]));
        }
        out.push(255);
    }
    out
}

fn scene(seed: u32, size: usize) -> Result<fsdiff::data::Scene, JsError> {
    render_scene(&SceneSpec::new(seed as u64, size, size, 3)).map_err(js)
}

/// γ_1..γ_T of a default-range linear schedule with `steps` steps.
#[wasm_bindgen]
pub fn schedule_gammas(steps: usize) -> Result<Vec<f64>, JsError> {
    let s = NoiseSchedule::with_default_betas(steps).map_err(js)?;
    Ok(s.gammas().to_vec())
}

/// RGBA of the fusion target of scene `seed` noised to step `t` of `steps`.
#[wasm_bindgen]
pub fn noise_preview(seed: u32, size: usize, steps: usize, t: usize) -> Result<Vec<u8>, JsError> {
    let sched = NoiseSchedule::with_default_betas(steps).map_err(js)?;
    let f0 = scene(seed, size)?.fusion_gt;
    let gamma = sched.gamma(t).map_err(js)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ t as u64);
    let noise: Vec<f32> = (0..f0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps = Tensor::from_vec(f0.shape(), noise).map_err(js)?;
    Ok(to_rgba(&forward_marginal(&f0, gamma, &eps).map_err(js)?))
}

/// Convolution kernel `K̄` of a diagonal SSM with `state` modes
/// `a_n = −decay·(n+1)`, unit B and C, sampled at `len` lags.
#[wasm_bindgen]
pub fn ssm_kernel(state: usize, decay: f64, delta: f64, len: usize) -> Result<Vec<f64>, JsError> {
    let a = (0..state).map(|n| -decay * (n + 1) as f64).collect();
    let p = SsmParams::new(a, vec![1.0; state], vec![1.0; state], delta).map_err(js)?;
    Ok(conv_kernel(&discretize(&p).map_err(js)?, len))
}

/// A visible image after blur, ×`scale` downsampling and bicubic upsampling.
#[wasm_bindgen]
pub struct DegradePreview {
    rgba: Vec<u8>,
    original: Vec<u8>,
    psnr_db: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl DegradePreview {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn original(&self) -> Vec<u8> {
        self.original.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

#[wasm_bindgen]
pub fn degrade_preview(seed: u32, size: usize, scale: usize, blur_sigma: f64) -> Result<DegradePreview, JsError> {
    let vi = scene(seed, size)?.vi;
    let up = upsample_bicubic(&degrade(&vi, scale, blur_sigma).map_err(js)?, scale).map_err(js)?;
    let mse = metrics::mse_image(&up, &vi).map_err(js)?;
    Ok(DegradePreview {
        rgba: to_rgba(&up),
        original: to_rgba(&vi),
        psnr_db: metrics::psnr_from_mse(mse, 255.0).map_err(js)?,
        ssim: metrics::ssim_image(&up, &vi).map_err(js)?,
    })
}
