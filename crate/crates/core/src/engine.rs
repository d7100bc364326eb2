//! Training (noise-prediction loss over random noise levels) and ancestral
//! sampling for the fusion model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bfm::{Bfm, BfmConfig, JOINT_CHANNELS};
use crate::clse::{select_semantics, Clarity, ClseModel};
use crate::data::{DatasetManifest, SceneRecord};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Init, ParamStore};
use crate::resample::upsample_bicubic;
use crate::schedule::{forward_marginal, NoiseSchedule};
use crate::tensor::{Scalar, Tensor};

/// Default optimiser step size.
pub const DEFAULT_LR: f64 = 1e-4;

/// One training example at LR input size.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub x_lr: Tensor<f32>,
    pub y_lr: Tensor<f32>,
    pub f0: Tensor<f32>,
    /// Known (VI, IR) clarity, when the source records it.
    pub clarity: (Clarity, Clarity),
    pub scale: usize,
}

impl TrainItem {
    /// Loads one manifest record (lossless sidecars preferred).
    pub fn from_record(manifest: &DatasetManifest, record: &SceneRecord) -> Result<Self> {
        let imgs = manifest.load_images(record)?;
        Ok(Self {
            x_lr: imgs.vi_lr,
            y_lr: imgs.ir_lr,
            f0: imgs.fusion_gt,
            clarity: (record.vi_clarity, record.ir_clarity),
            scale: record.scale,
        })
    }
}

/// Upsampled inputs and the semantics chosen for them.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub x_up: Tensor<f32>,
    pub y_up: Tensor<f32>,
    pub sem: Tensor<f32>,
    /// Judged (VI, IR) clarity.
    pub labels: (Clarity, Clarity),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedItem {
    pub cond: Conditions,
    pub f0: Tensor<f32>,
}

/// Bicubic upsampling of both inputs, per-modality clarity judgement and
/// semantic selection.
pub fn prepare_conditions(x_lr: &Tensor<f32>, y_lr: &Tensor<f32>, scale: usize, clse: &ClseModel) -> Result<Conditions> {
    let (xc, xh, xw) = x_lr.dims3()?;
    let (yc, yh, yw) = y_lr.dims3()?;
    if xc != 3 || yc != 1 || (xh, xw) != (yh, yw) {
        return Err(Error::Contract(format!(
            "need a [3, h, w] visible and [1, h, w] infrared pair, got {:?} and {:?}",
            x_lr.shape(),
            y_lr.shape()
        )));
    }
    let x_up = upsample_bicubic(x_lr, scale)?;
    let y_up = upsample_bicubic(y_lr, scale)?;
    let (ex, lx) = clse.sense(&x_up)?;
    let (ey, ly) = clse.sense(&y_up)?;
    let sem = select_semantics(&ex, &ey, lx, ly)?;
    Ok(Conditions {
        x_up,
        y_up,
        sem,
        labels: (lx, ly),
    })
}

pub fn prepare_item(item: &TrainItem, clse: &ClseModel) -> Result<PreparedItem> {
    let cond = prepare_conditions(&item.x_lr, &item.y_lr, item.scale, clse)?;
    let (_, h, w) = cond.x_up.dims3()?;
    if item.f0.shape() != [3, h, w] {
        return Err(Error::Contract(format!(
            "target {:?} does not match upsampled inputs [3, {h}, {w}] at scale {}",
            item.f0.shape(),
            item.scale
        )));
    }
    Ok(PreparedItem {
        cond,
        f0: item.f0.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side length of the (square) HR images the model runs on.
    pub hr_size: usize,
    pub sem_dim: usize,
    pub bfm: BfmConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hr_size: 64,
            sem_dim: 96,
            bfm: BfmConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

/// Joint encoder followed by the conditional denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub config: ModelConfig,
    pub bfm: Bfm,
    pub denoiser: Denoiser,
}

impl FusionNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let n = config.hr_size;
        let bfm = Bfm::new(config.bfm.clone(), JOINT_CHANNELS, n, n)?;
        let denoiser = Denoiser::new(config.denoiser.clone(), config.bfm.feat_channels, config.sem_dim)?;
        if n % denoiser.spatial_multiple() != 0 {
            return Err(Error::Config(format!(
                "hr_size {n} not divisible by {}",
                denoiser.spatial_multiple()
            )));
        }
        Ok(Self { config, bfm, denoiser })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Init::new(&mut rng);
        self.bfm.init(&mut p);
        self.denoiser.init(&mut p);
        p.finish()
    }

    /// Checks that `params` has exactly this model's keys and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let fresh = self.init_params(0);
        let spec: Vec<(String, Vec<usize>)> = fresh.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        params.check_layout(&spec)
    }

    pub fn predict_eps_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x_up: Var, y_up: Var, f_t: Var, gamma: f64, sem: Var) -> Result<Var> {
        let s_hat = self.bfm.encode_graph(g, p, x_up, y_up, f_t)?;
        Ok(self.denoiser.forward_graph(g, p, s_hat, gamma, sem)?.eps)
    }

    pub fn predict_eps<T: Scalar>(&self, params: &ParamStore<T>, cond: &Conditions, f_t: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(cond.x_up.cast());
        let y = g.constant(cond.y_up.cast());
        let f = g.constant(f_t.clone());
        let s = g.constant(cond.sem.cast());
        let eps = self.predict_eps_graph(&mut g, &p, x, y, f, gamma, s)?;
        Ok(g.value(eps).clone())
    }

    /// Per-element mean squared noise-prediction error and its gradients.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        item: &PreparedItem,
        gamma: f64,
        eps: &Tensor<T>,
    ) -> Result<(f64, ParamStore<T>)> {
        let f_t = forward_marginal(&item.f0.cast(), gamma, eps)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let x = g.constant(item.cond.x_up.cast());
        let y = g.constant(item.cond.y_up.cast());
        let f = g.constant(f_t);
        let s = g.constant(item.cond.sem.cast());
        let target = g.constant(eps.clone());
        let pred = self.predict_eps_graph(&mut g, &p, x, y, f, gamma, s)?;
        let loss = g.mse(pred, target)?;
        g.check_finite(loss, "loss")?;
        let mut grads = g.backward(loss)?;
        let grads = p.collect_grads(&g, &mut grads);
        Ok((g.value(loss).data()[0].to_f64(), grads))
    }
}

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("noise shape")
}

/// Result of one optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
}

/// Parameters, optimiser state and the training schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: FusionNet,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Trainer {
    pub fn new(net: FusionNet, schedule: NoiseSchedule, lr: f64, seed: u64) -> Self {
        let params = net.init_params(seed);
        let adam = Adam::new(&params, lr);
        Self {
            net,
            params,
            adam,
            schedule,
            seed,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Random source for step `step`; depends only on the seed and step so
    /// resumed runs draw the same noise.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }

    /// One optimiser update on `batch`.
    ///
    /// Noise levels and noise are drawn sequentially, item gradients are
    /// computed in parallel and summed in batch order, so the result does
    /// not depend on the thread count.
    pub fn train_step(&mut self, batch: &[PreparedItem]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let mut rng = Self::step_rng(self.seed, self.adam.step);
        let draws: Vec<(f64, Tensor<f32>)> = batch
            .iter()
            .map(|item| {
                let (_, gamma) = self.schedule.sample_gamma(&mut rng);
                (gamma, normal_tensor(item.f0.shape(), &mut rng))
            })
            .collect();
        let results = crate::par::map(batch, |i, item| self.net.loss_and_grads(&self.params, item, draws[i].0, &draws[i].1));
        let mut total = 0.0;
        let mut sum: Option<ParamStore<f32>> = None;
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (k, g) in grads.iter() {
                        acc.get_mut(k).expect("same keys").add_assign(g);
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        let mut grads = sum.expect("non-empty batch");
        let keys: Vec<String> = grads.keys().cloned().collect();
        for k in keys {
            let g = grads.get_mut(&k).expect("key");
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NumericFault {
                layer: "loss".into(),
                detail: format!("non-finite batch loss at step {}", self.adam.step),
            });
        }
        self.adam.update(&mut self.params, &grads)?;
        Ok(StepStats {
            step: self.adam.step,
            loss,
        })
    }
}

/// Item indices for training step `step`: consecutive slices of
/// per-epoch permutations of `0..n`, a pure function of its arguments.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut perms: Vec<(u64, Vec<usize>)> = Vec::new();
    (0..batch as u64)
        .map(|k| {
            let pos = step * batch as u64 + k;
            let (epoch, i) = (pos / n as u64, (pos % n as u64) as usize);
            if perms.last().map(|p| p.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7300);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                perms.push((epoch, perm));
            }
            perms.last().expect("perm").1[i]
        })
        .collect()
}

/// Per-pixel mean of the upsampled visible image and the infrared image
/// broadcast to three channels.
pub fn mean_baseline(x_up: &Tensor<f32>, y_up: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = x_up.dims3()?;
    if x_up.shape()[0] != 3 || y_up.shape() != [1, h, w] {
        return Err(Error::Contract(format!("baseline inputs {:?} and {:?}", x_up.shape(), y_up.shape())));
    }
    let ir = y_up.data();
    let data = x_up.data().iter().enumerate().map(|(i, &v)| 0.5 * (v + ir[i % (h * w)])).collect();
    Tensor::from_vec(x_up.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Reverse steps; the training schedule is stretched to this length.
    pub steps: usize,
    pub seed: u64,
    pub clip_estimate: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            seed: 0,
            clip_estimate: true,
        }
    }
}

/// Anything that predicts the noise in `f_t` at noise level `gamma`.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, f_t: &Tensor<T>, t: usize, gamma: f64) -> Result<Tensor<T>>;
}

/// A trained network with fixed conditions.
pub struct ConditionedNet<'a> {
    pub net: &'a FusionNet,
    pub params: &'a ParamStore<f32>,
    pub cond: &'a Conditions,
}

impl NoisePredictor<f32> for ConditionedNet<'_> {
    fn predict(&self, f_t: &Tensor<f32>, _t: usize, gamma: f64) -> Result<Tensor<f32>> {
        self.net.predict_eps(self.params, self.cond, f_t, gamma)
    }
}

/// `(f_t − sqrt(1 − γ)·ε̂) / sqrt(γ)`, optionally clipped to `[−1, 1]`.
pub fn estimate_f0<T: Scalar>(f_t: &Tensor<T>, eps_hat: &Tensor<T>, gamma: f64, clip: bool) -> Result<Tensor<T>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Contract(format!("γ = {gamma} outside (0, 1]")));
    }
    if f_t.shape() != eps_hat.shape() {
        return Err(Error::Contract(format!("ε̂ {:?} vs f_t {:?}", eps_hat.shape(), f_t.shape())));
    }
    let a = T::from_f64((1.0 - gamma).sqrt());
    let inv = T::from_f64(1.0 / gamma.sqrt());
    let (lo, hi) = (T::from_f64(-1.0), T::ONE);
    Ok(f_t.zip_map(eps_hat, |f, e| {
        let v = (f - a * e) * inv;
        if clip {
            v.max(lo).min(hi)
        } else {
            v
        }
    }))
}

/// One reverse step from `t` to `t − 1`.
///
/// With `clip` the noise estimate is replaced by the one consistent with the
/// clipped F̂ before the update. The stochastic term is absent at `t = 1`.
pub fn refine_step<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    f_t: &Tensor<T>,
    schedule: &NoiseSchedule,
    t: usize,
    clip: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let alpha = schedule.alpha(t)?;
    let gamma = schedule.gamma(t)?;
    if alpha >= 1.0 {
        return Ok(f_t.clone());
    }
    let mut eps = predictor.predict(f_t, t, gamma)?;
    if eps.shape() != f_t.shape() {
        return Err(Error::Contract(format!("predicted noise {:?} for f_t {:?}", eps.shape(), f_t.shape())));
    }
    if clip {
        let f0 = estimate_f0(f_t, &eps, gamma, true)?;
        let (sg, inv) = (T::from_f64(gamma.sqrt()), T::from_f64(1.0 / (1.0 - gamma).sqrt()));
        eps = f_t.zip_map(&f0, |f, x| (f - sg * x) * inv);
    }
    let c = T::from_f64((1.0 - alpha) / (1.0 - gamma).sqrt());
    let inv_sa = T::from_f64(1.0 / alpha.sqrt());
    let mut out = f_t.zip_map(&eps, |f, e| (f - c * e) * inv_sa);
    if t > 1 {
        let s = T::from_f64((1.0 - alpha).sqrt());
        for v in out.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += s * T::from_f64(z);
        }
    }
    Ok(out)
}

/// Full reverse chain from `F_T ~ N(0, I)`; the result is clipped to `[−1, 1]`.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized>(predictor: &P, shape: &[usize], schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut f = normal_tensor::<T, _>(shape, &mut rng);
    for t in (1..=schedule.steps()).rev() {
        f = refine_step(predictor, &f, schedule, t, cfg.clip_estimate, &mut rng)?;
        if !f.all_finite() {
            return Err(Error::NumericFault {
                layer: "sampler".into(),
                detail: format!("non-finite sample after step {t}"),
            });
        }
    }
    let (lo, hi) = (T::from_f64(-1.0), T::ONE);
    Ok(f.map(|v| v.max(lo).min(hi)))
}

/// Fuses one LR pair: conditions are computed once, then the chain runs on
/// the stretched schedule.
pub fn fuse(
    net: &FusionNet,
    params: &ParamStore<f32>,
    clse: &ClseModel,
    x_lr: &Tensor<f32>,
    y_lr: &Tensor<f32>,
    scale: usize,
    train_schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let cond = prepare_conditions(x_lr, y_lr, scale, clse)?;
    let (_, h, w) = cond.x_up.dims3()?;
    let n = net.config.hr_size;
    if (h, w) != (n, n) {
        return Err(Error::Contract(format!("upsampled inputs are {h}×{w}, model runs at {n}×{n}")));
    }
    let schedule = train_schedule.stretched(cfg.steps)?;
    let predictor = ConditionedNet { net, params, cond: &cond };
    sample(&predictor, &[3, h, w], &schedule, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clse::ClseConfig;
    use crate::data::{degrade, render_scene, SceneSpec};

    /// Predicts the exact noise for a known clean signal.
    struct TrueEps<T> {
        f0: Tensor<T>,
    }

    impl<T: Scalar> NoisePredictor<T> for TrueEps<T> {
        fn predict(&self, f_t: &Tensor<T>, _t: usize, gamma: f64) -> Result<Tensor<T>> {
            let (a, b) = (T::from_f64(gamma.sqrt()), T::from_f64(1.0 / (1.0 - gamma).sqrt()));
            Ok(f_t.zip_map(&self.f0, |f, x| (f - a * x) * b))
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hr_size: 8,
            sem_dim: 8,
            bfm: BfmConfig {
                patch: 2,
                dim: 8,
                depth: 1,
                state: 4,
                conv_kernel: 3,
                feat_channels: 4,
            },
            denoiser: DenoiserConfig {
                widths: vec![4, 8],
                res_blocks: 1,
                groups: 2,
                gamma_embed_dim: 8,
                sem_tokens: 2,
                attn_dim: 4,
            },
        }
    }

    fn tiny_clse() -> ClseModel {
        ClseModel::init(ClseConfig {
            channels: vec![4],
            sem_dim: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_item(seed: u64) -> TrainItem {
        let scene = render_scene(&SceneSpec::new(seed, 8, 8, 2)).unwrap();
        TrainItem {
            x_lr: degrade(&scene.vi, 2, 0.0).unwrap(),
            y_lr: degrade(&scene.ir, 2, 0.0).unwrap(),
            f0: scene.fusion_gt,
            clarity: (Clarity::Clear, Clarity::Clear),
            scale: 2,
        }
    }

    #[test]
    fn estimate_hand_values() {
        let f = Tensor::from_vec(&[1], vec![0.9330127018922193f64]).unwrap();
        let e = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let out = estimate_f0(&f, &e, 0.25, false).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-9);
        assert_eq!(estimate_f0(&f, &e, 1.0, false).unwrap(), f);
        assert!(estimate_f0(&f, &e, 0.0, false).is_err());
        let big = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        assert_eq!(estimate_f0(&big, &e, 0.25, true).unwrap().data()[0], 1.0);
    }

    #[test]
    fn oracle_inversion_every_step() {
        let s = NoiseSchedule::with_default_betas(4000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f0: Tensor<f64> = Tensor::from_vec(&[16], (0..16).map(|i| (i as f64 / 8.0) - 1.0).collect()).unwrap();
        for t in 1..=4000 {
            let g = s.gamma(t).unwrap();
            let eps = normal_tensor::<f64, _>(&[16], &mut rng);
            let ft = forward_marginal(&f0, g, &eps).unwrap();
            let rec = estimate_f0(&ft, &eps, g, false).unwrap();
            let err = rec.zip_map(&f0, |a, b| (a - b).abs()).max_abs();
            assert!(err <= 1e-5, "t={t} err={err}");
        }
    }

    #[test]
    fn refine_hand_value_and_edge_cases() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let f0 = Tensor::from_vec(&[1], vec![0.5f64]).unwrap();
        let oracle = TrueEps { f0: f0.clone() };
        let ft = Tensor::from_vec(&[1], vec![0.2f64]).unwrap();
        // t = 2: α = 0.8, γ = 0.72
        let eps = (0.2 - 0.72f64.sqrt() * 0.5) / 0.28f64.sqrt();
        let mean = (0.2 - 0.2 / 0.28f64.sqrt() * eps) / 0.8f64.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: f64 = StandardNormal.sample(&mut rng.clone());
        let out = refine_step(&oracle, &ft, &s, 2, false, &mut rng).unwrap();
        assert!((out.data()[0] - (mean + 0.2f64.sqrt() * z)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps1 = (0.2 - 0.9f64.sqrt() * 0.5) / 0.1f64.sqrt();
        let det = (0.2 - 0.1 / 0.1f64.sqrt() * eps1) / 0.9f64.sqrt();
        let out = refine_step(&oracle, &ft, &s, 1, false, &mut rng).unwrap();
        assert!((out.data()[0] - det).abs() < 1e-12);
        let mut fresh = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(rng.gen::<u64>(), fresh.gen::<u64>());

        let flat = NoiseSchedule::linear(2, 0.0, 0.0).unwrap();
        assert_eq!(refine_step(&oracle, &ft, &flat, 2, true, &mut rng).unwrap(), ft);
        assert!(refine_step(&oracle, &ft, &s, 4, true, &mut rng).is_err());
        assert!(refine_step(&oracle, &ft, &s, 0, true, &mut rng).is_err());
    }

    #[test]
    fn clipping_is_inert_for_in_range_estimates() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let oracle = TrueEps {
            f0: Tensor::from_vec(&[2], vec![0.3f64, -0.7]).unwrap(),
        };
        let ft = Tensor::from_vec(&[2], vec![0.1f64, 0.4]).unwrap();
        let a = refine_step(&oracle, &ft, &s, 3, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = refine_step(&oracle, &ft, &s, 3, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-12);
    }

    #[test]
    fn oracle_sampler_mean_converges() {
        let train = NoiseSchedule::with_default_betas(4000).unwrap();
        let s = train.stretched(100).unwrap();
        let f0 = Tensor::from_vec(&[1], vec![0.4f64]).unwrap();
        let oracle = TrueEps { f0: f0.clone() };
        let runs = 10_000;
        let mut sum = 0.0;
        for seed in 0..runs {
            let cfg = SamplerConfig {
                steps: 100,
                seed,
                clip_estimate: false,
            };
            let out = sample(&oracle, &[1], &s, &cfg).unwrap();
            assert!(out.data()[0].abs() <= 1.0);
            sum += out.data()[0];
        }
        assert!((sum / runs as f64 - 0.4).abs() < 0.02);
    }

    #[test]
    fn prepare_routes_semantics() {
        let clse = tiny_clse();
        let item = tiny_item(1);
        let p = prepare_item(&item, &clse).unwrap();
        assert_eq!(p.cond.x_up.shape(), &[3, 8, 8]);
        assert_eq!(p.cond.y_up.shape(), &[1, 8, 8]);
        let ex = clse.embed_content(&p.cond.x_up).unwrap();
        let ey = clse.embed_content(&p.cond.y_up).unwrap();
        let (lx, ly) = p.cond.labels;
        assert_eq!(p.cond.sem, select_semantics(&ex, &ey, lx, ly).unwrap());

        let same = prepare_conditions(&item.f0, &Tensor::zeros(&[1, 8, 8]), 1, &clse).unwrap();
        assert_eq!(same.x_up, item.f0);
        let mut bad = item.clone();
        bad.scale = 4;
        assert!(prepare_item(&bad, &clse).is_err());
        assert!(prepare_conditions(&item.y_lr, &item.x_lr, 2, &clse).is_err());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let net = FusionNet::new(tiny_config()).unwrap();
        let clse = tiny_clse();
        let batch: Vec<PreparedItem> = (0..4).map(|i| prepare_item(&tiny_item(i), &clse).unwrap()).collect();
        let sched = NoiseSchedule::with_default_betas(200).unwrap();
        let mut a = Trainer::new(net.clone(), sched.clone(), 1e-2, 5);
        let mut b = Trainer::new(net, sched, 1e-2, 5);
        let mut losses = Vec::new();
        for _ in 0..40 {
            losses.push(a.train_step(&batch).unwrap().loss);
            b.train_step(&batch).unwrap();
        }
        assert_eq!(a.params, b.params);
        assert!(losses.iter().all(|&l| l >= 0.0));
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[30..].iter().sum();
        assert!(tail < head, "{losses:?}");
        assert!(a.train_step(&[]).is_err());
    }

    #[test]
    fn fuse_is_deterministic_with_bounded_output() {
        let net = FusionNet::new(tiny_config()).unwrap();
        let params = net.init_params(2);
        net.check_params(&params).unwrap();
        let clse = tiny_clse();
        let item = tiny_item(3);
        let sched = NoiseSchedule::with_default_betas(200).unwrap();
        let cfg = SamplerConfig {
            steps: 50,
            seed: 4,
            clip_estimate: true,
        };
        let a = fuse(&net, &params, &clse, &item.x_lr, &item.y_lr, 2, &sched, &cfg).unwrap();
        let b = fuse(&net, &params, &clse, &item.x_lr, &item.y_lr, 2, &sched, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 8, 8]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(fuse(&net, &params, &clse, &item.x_lr, &item.y_lr, 4, &sched, &cfg).is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(n, 4, 7, s)).collect();
        assert_eq!(seen.len(), 20);
        let first: Vec<usize> = seen.drain(..10).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(n, 4, 7, 3), batch_indices(n, 4, 7, 3));
        assert_ne!(batch_indices(n, 10, 7, 0), batch_indices(n, 10, 7, 1));
    }

    #[test]
    fn baseline_averages_modalities() {
        let x = Tensor::from_vec(&[3, 1, 2], vec![1.0, 0.0, -1.0, 0.5, 0.2, 0.2]).unwrap();
        let y = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(mean_baseline(&x, &y).unwrap().data(), &[0.5, 0.5, -0.5, 0.75, 0.1, 0.6]);
        assert!(mean_baseline(&y, &x).is_err());
    }

    #[test]
    fn oracle_chain_stays_in_range() {
        let s = NoiseSchedule::with_default_betas(200).unwrap();
        let f0 = Tensor::from_vec(&[3, 4, 4], (0..48).map(|i| ((i % 7) as f64 / 3.5) - 1.0).collect()).unwrap();
        let oracle = TrueEps { f0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = normal_tensor::<f64, _>(&[3, 4, 4], &mut rng);
        for t in (1..=200).rev() {
            f = refine_step(&oracle, &f, &s, t, true, &mut rng).unwrap();
            assert!(f.all_finite() && f.max_abs() < 10.0);
        }
    }
}
