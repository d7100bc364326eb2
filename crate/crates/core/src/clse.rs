//! Clarity sensing and semantic extraction.
//!
//! A small convolutional content encoder runs alongside a controller branch
//! that feeds it through zero-initialised 1×1 convolutions. The controller
//! embedding is matched against two learned prototypes (clear, blur); the
//! content embedding conditions the denoiser.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ClarityPair;
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub use crate::data::Clarity;

const NORM_EPS: f64 = 1e-12;
const STD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClseConfig {
    /// Channels of the stride-2 conv stages shared by both branches.
    pub channels: Vec<usize>,
    pub sem_dim: usize,
    /// Softmax temperature for prototype and contrastive logits.
    pub temperature: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight on `‖e(blur) − sg(e(clear))‖²`.
    pub consistency_weight: f64,
    /// Weight on the in-batch blurred→clear contrastive term.
    pub contrast_weight: f64,
    pub seed: u64,
}

impl Default for ClseConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            sem_dim: 96,
            temperature: 0.1,
            epochs: 20,
            batch: 16,
            lr: 2e-3,
            consistency_weight: 1.0,
            contrast_weight: 1.0,
            seed: 0,
        }
    }
}

impl ClseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.sem_dim == 0 {
            return Err(Error::Config("clse needs non-empty channels and sem_dim".into()));
        }
        if !(self.temperature > 0.0) || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("clse temperature, batch and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClseModel {
    pub config: ClseConfig,
    pub params: ParamStore<f32>,
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub clarity_loss: f64,
    pub content_loss: f64,
}

/// Branch outputs for one image.
#[derive(Clone, Copy, Debug)]
struct Embeddings {
    content: Var,
    control: Var,
}

/// Zero mean, unit variance over all pixels; one channel becomes three.
pub fn standardize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::Contract(format!("clse input has {c} channels, expected 1 or 3")));
    }
    if !image.all_finite() {
        return Err(Error::Contract("clse input has non-finite pixels".into()));
    }
    let n = image.len() as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + STD_EPS);
    let plane: Vec<f32> = image.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
    let data = if c == 1 { plane.repeat(3) } else { plane };
    Tensor::from_vec(&[3, h, w], data)
}

impl ClseModel {
    /// Freshly initialised model.
    pub fn init(config: ClseConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Init::new(&mut rng);
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            for branch in ["ctrl", "enc"] {
                p.kaiming(format!("clse.{branch}.{i}.w"), &[c, cin, 3, 3], cin * 9);
                p.zeros(format!("clse.{branch}.{i}.b"), &[c]);
            }
            p.zeros(format!("clse.zc.{i}.w"), &[c, c, 1, 1]);
            p.zeros(format!("clse.zc.{i}.b"), &[c]);
            cin = c;
        }
        let d = config.sem_dim;
        p.lecun("clse.ctrl_head.w", &[2 * cin, d], 2 * cin);
        p.zeros("clse.ctrl_head.b", &[d]);
        p.lecun("clse.content_head.w", &[cin, d], cin);
        p.zeros("clse.content_head.b", &[d]);
        p.normal("clse.proto", &[2, d], 1.0);
        Ok(Self {
            params: p.finish(),
            config,
        })
    }

    pub fn layout(&self) -> Result<()> {
        let fresh = Self::init(self.config.clone())?;
        let spec: Vec<(String, Vec<usize>)> = fresh.params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        self.params.check_layout(&spec)
    }

    fn branches(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Embeddings> {
        let (mut hc, mut he) = (x, x);
        for i in 0..self.config.channels.len() {
            let c = g.conv2d(hc, p.var(&format!("clse.ctrl.{i}.w")), 2, 1)?;
            let c = g.add_channel_bias(c, p.var(&format!("clse.ctrl.{i}.b")))?;
            hc = g.silu(c);
            let e = g.conv2d(he, p.var(&format!("clse.enc.{i}.w")), 2, 1)?;
            let e = g.add_channel_bias(e, p.var(&format!("clse.enc.{i}.b")))?;
            let e = g.silu(e);
            let z = g.conv2d(hc, p.var(&format!("clse.zc.{i}.w")), 1, 0)?;
            let z = g.add_channel_bias(z, p.var(&format!("clse.zc.{i}.b")))?;
            he = g.add(e, z)?;
        }
        let head = |g: &mut Graph<f32>, pooled: Var, name: &str| -> Result<Var> {
            let y = g.linear(pooled, p.var(&format!("clse.{name}.w")), Some(p.var(&format!("clse.{name}.b"))))?;
            g.l2_normalize_rows(y, NORM_EPS)
        };
        let pooled = g.global_avg_pool(he)?;
        let content = head(g, pooled, "content_head")?;
        // mean and mean-square pooling; the latter keeps sparse strong edges visible
        let mean = g.global_avg_pool(hc)?;
        let sq = g.square(hc);
        let energy = g.global_avg_pool(sq)?;
        let stats = g.concat(&[mean, energy])?;
        let stats = g.reshape(stats, &[1, 2 * g.shape(mean)[1]])?;
        let control = head(g, stats, "ctrl_head")?;
        g.check_finite(content, "clse.content")?;
        Ok(Embeddings { content, control })
    }

    fn prototypes(&self, g: &mut Graph<f32>, p: &Bound) -> Result<Var> {
        g.l2_normalize_rows(p.var("clse.proto"), NORM_EPS)
    }

    fn run(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let x = standardize(image)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let e = self.branches(&mut g, &p, xv)?;
        let protos = self.prototypes(&mut g, &p)?;
        let sims = g.matmul_bt(e.control, protos)?;
        Ok((g.value(e.content).clone(), g.value(e.control).clone(), g.value(sims).clone()))
    }

    /// Unit-norm content embedding `[1, sem_dim]`.
    pub fn embed_content(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.run(image)?.0)
    }

    /// Controller embedding `[1, sem_dim]`.
    pub fn embed_control(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.run(image)?.1)
    }

    /// Cosine similarity of the controller embedding to (clear, blur).
    pub fn clarity_scores(&self, image: &Tensor<f32>) -> Result<(f32, f32)> {
        let s = self.run(image)?.2;
        Ok((s.data()[0], s.data()[1]))
    }

    /// Nearest prototype; an exact tie is judged blurred.
    pub fn judge_clarity(&self, image: &Tensor<f32>) -> Result<Clarity> {
        let (clear, blur) = self.clarity_scores(image)?;
        Ok(clarity_from_scores(clear, blur))
    }

    /// Content embedding and clarity label in one pass.
    pub fn sense(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Clarity)> {
        let (content, _, s) = self.run(image)?;
        Ok((content, clarity_from_scores(s.data()[0], s.data()[1])))
    }

    /// Cosine similarity of the two prototypes.
    pub fn prototype_cosine(&self) -> f32 {
        let p = self.params.get("clse.proto").expect("clse.proto");
        let d = self.config.sem_dim;
        let (a, b) = p.data().split_at(d);
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f32>().sqrt();
        dot / (na * nb)
    }
}

pub fn clarity_from_scores(clear: f32, blur: f32) -> Clarity {
    if clear > blur {
        Clarity::Clear
    } else {
        Clarity::Blur
    }
}

/// Semantics that condition fusion, given both content embeddings and
/// their clarity labels. With one clear and one blurred input the clear
/// side wins; otherwise the elementwise maximum is renormalised.
pub fn select_semantics(e1: &Tensor<f32>, e2: &Tensor<f32>, l1: Clarity, l2: Clarity) -> Result<Tensor<f32>> {
    if e1.shape() != e2.shape() {
        return Err(Error::Contract(format!("embedding shapes {:?} and {:?}", e1.shape(), e2.shape())));
    }
    match (l1, l2) {
        (Clarity::Clear, Clarity::Blur) => Ok(e1.clone()),
        (Clarity::Blur, Clarity::Clear) => Ok(e2.clone()),
        _ => {
            if e1 == e2 {
                return Ok(e1.clone());
            }
            let m = e1.zip_map(e2, f32::max);
            let norm = m.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NumericFault {
                    layer: "clse.select".into(),
                    detail: "elementwise maximum has zero norm".into(),
                });
            }
            Ok(m.map(|v| (v as f64 / norm) as f32))
        }
    }
}

/// Trains a fresh model on clear/blurred pairs.
///
/// Each batch minimises prototype cross-entropy over both views, a
/// consistency term pulling blurred content embeddings onto the detached
/// clear ones, and an in-batch contrastive term matching each blurred view
/// to its own clear view.
pub fn pretrain_clse(pairs: &[ClarityPair], config: &ClseConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<ClseModel> {
    if pairs.is_empty() {
        return Err(Error::Config("clarity pretraining needs at least one pair".into()));
    }
    let mut model = ClseModel::init(config.clone())?;
    let inputs: Vec<(Tensor<f32>, Tensor<f32>)> = pairs
        .iter()
        .map(|p| Ok((standardize(&p.clear)?, standardize(&p.blurred)?)))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(&model.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x636c_7365);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..config.epochs {
        // cosine decay to zero over the run
        adam.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
        order.shuffle(&mut rng);
        let (mut tot, mut cls, mut con, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let (l, lc, ln) = train_batch(&mut model, &mut adam, &inputs, chunk)?;
            tot += l;
            cls += lc;
            con += ln;
            batches += 1;
        }
        let b = batches as f64;
        on_epoch(&EpochStats {
            epoch,
            loss: tot / b,
            clarity_loss: cls / b,
            content_loss: con / b,
        });
    }
    Ok(model)
}

fn train_batch(model: &mut ClseModel, adam: &mut Adam, inputs: &[(Tensor<f32>, Tensor<f32>)], idx: &[usize]) -> Result<(f64, f64, f64)> {
    let cfg = model.config.clone();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let (mut ctrl, mut clear, mut blur) = (Vec::new(), Vec::new(), Vec::new());
    let mut labels = Vec::new();
    for &i in idx {
        let (c, b) = &inputs[i];
        let cv = g.constant(c.clone());
        let ec = model.branches(&mut g, &p, cv)?;
        let bv = g.constant(b.clone());
        let eb = model.branches(&mut g, &p, bv)?;
        ctrl.extend([ec.control, eb.control]);
        labels.extend([0usize, 1]);
        clear.push(ec.content);
        blur.push(eb.content);
    }
    let inv_t = 1.0 / cfg.temperature;
    let protos = model.prototypes(&mut g, &p)?;
    let ctrl = g.concat(&ctrl)?;
    let logits = g.matmul_bt(ctrl, protos)?;
    let logits = g.scale(logits, inv_t);
    let clarity = g.cross_entropy(logits, &labels)?;

    let clear = g.concat(&clear)?;
    let blur = g.concat(&blur)?;
    let target = g.detach(clear);
    let diff = g.sub(blur, target)?;
    let sq = g.square(diff);
    let sq = g.sum(sq);
    let consistency = g.scale(sq, 1.0 / idx.len() as f64);
    let sims = g.matmul_bt(blur, clear)?;
    let sims = g.scale(sims, inv_t);
    let diag: Vec<usize> = (0..idx.len()).collect();
    let contrast = g.cross_entropy(sims, &diag)?;
    let a = g.scale(consistency, cfg.consistency_weight);
    let b = g.scale(contrast, cfg.contrast_weight);
    let content = g.add(a, b)?;
    let loss = g.add(clarity, content)?;
    g.check_finite(loss, "clse.loss")?;

    let mut grads = g.backward(loss)?;
    let grads = p.collect_grads(&g, &mut grads);
    adam.update(&mut model.params, &grads)?;
    let v = |x: Var| g.value(x).data()[0] as f64;
    Ok((v(loss), v(clarity), v(content)))
}

/// Fraction of images judged correctly; each pair contributes both views.
pub fn clarity_accuracy(model: &ClseModel, pairs: &[ClarityPair]) -> Result<f64> {
    let hits = crate::par::map(pairs, |_, p| -> Result<usize> {
        let c = model.judge_clarity(&p.clear)? == Clarity::Clear;
        let b = model.judge_clarity(&p.blurred)? == Clarity::Blur;
        Ok(c as usize + b as usize)
    });
    let total: usize = hits.into_iter().sum::<Result<usize>>()?;
    Ok(total as f64 / (2 * pairs.len()).max(1) as f64)
}

/// Fraction of blurred views whose content embedding is closest (cosine)
/// to their own clear view among all clear views.
pub fn retrieval_accuracy(model: &ClseModel, pairs: &[ClarityPair]) -> Result<f64> {
    let embs = crate::par::map(pairs, |_, p| -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((model.embed_content(&p.clear)?, model.embed_content(&p.blurred)?))
    });
    let embs: Vec<(Tensor<f32>, Tensor<f32>)> = embs.into_iter().collect::<Result<_>>()?;
    let dot = |a: &Tensor<f32>, b: &Tensor<f32>| -> f32 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
    let hits = embs
        .iter()
        .enumerate()
        .filter(|(i, (_, blur))| {
            let own = dot(blur, &embs[*i].0);
            embs.iter().enumerate().all(|(j, (clear, _))| j == *i || dot(blur, clear) < own)
        })
        .count();
    Ok(hits as f64 / embs.len().max(1) as f64)
}
