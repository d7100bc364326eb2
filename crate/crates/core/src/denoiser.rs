//! Conditional noise predictor: a small U-Net over the joint feature map,
//! conditioned on the noise level through per-block channel biases and on
//! the semantic embedding through cross-attention at the bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

const GN_EPS: f64 = 1e-5;
/// `√γ` is scaled to `[0, GAMMA_SCALE]` before the sinusoidal encoding.
pub const GAMMA_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channel widths per resolution level, finest first.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    pub gamma_embed_dim: usize,
    /// Semantic tokens the embedding is expanded into.
    pub sem_tokens: usize,
    pub attn_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            res_blocks: 2,
            groups: 8,
            gamma_embed_dim: 64,
            sem_tokens: 4,
            attn_dim: 64,
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predicted noise `[3, H, W]`.
    pub eps: Var,
    /// Bottleneck attention weights `[H'·W', k]`.
    pub attention: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub sem_dim: usize,
}

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, in_channels: usize, sem_dim: usize) -> Result<Self> {
        let c = &config;
        if c.widths.is_empty() || c.res_blocks == 0 || c.groups == 0 || sem_dim == 0 || in_channels == 0 {
            return Err(Error::Config("denoiser needs widths, res blocks, groups and inputs".into()));
        }
        if let Some(w) = c.widths.iter().find(|&&w| w == 0 || w % c.groups != 0) {
            return Err(Error::Config(format!("width {w} not a positive multiple of {} groups", c.groups)));
        }
        if c.gamma_embed_dim == 0 || c.gamma_embed_dim % 2 != 0 {
            return Err(Error::Config("gamma embedding dim must be even and positive".into()));
        }
        if c.sem_tokens == 0 || c.attn_dim == 0 {
            return Err(Error::Config("cross-attention needs tokens and a key width".into()));
        }
        Ok(Self {
            config,
            in_channels,
            out_channels: 3,
            sem_dim,
        })
    }

    fn emb_dim(&self) -> usize {
        4 * self.config.widths[0]
    }

    /// Side lengths must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.config.widths.len() - 1)
    }

    fn init_res<R: Rng>(&self, p: &mut Init<R>, k: &str, cin: usize, cout: usize) {
        p.full(key(k, "norm1.g"), &[cin], 1.0);
        p.zeros(key(k, "norm1.b"), &[cin]);
        p.kaiming(key(k, "conv1.w"), &[cout, cin, 3, 3], cin * 9);
        p.zeros(key(k, "conv1.b"), &[cout]);
        p.lecun(key(k, "emb.w"), &[self.emb_dim(), cout], self.emb_dim());
        p.zeros(key(k, "emb.b"), &[cout]);
        p.full(key(k, "norm2.g"), &[cout], 1.0);
        p.zeros(key(k, "norm2.b"), &[cout]);
        p.zeros(key(k, "conv2.w"), &[cout, cout, 3, 3]);
        p.zeros(key(k, "conv2.b"), &[cout]);
        if cin != cout {
            p.lecun(key(k, "skip.w"), &[cout, cin, 1, 1], cin);
            p.zeros(key(k, "skip.b"), &[cout]);
        }
    }

    /// Adds freshly initialised parameters under `den.`.
    pub fn init<R: Rng>(&self, p: &mut Init<R>) {
        let c = &self.config;
        let (ge, emb) = (c.gamma_embed_dim, self.emb_dim());
        p.lecun("den.gamma.l1.w", &[ge, emb], ge);
        p.zeros("den.gamma.l1.b", &[emb]);
        p.lecun("den.gamma.l2.w", &[emb, emb], emb);
        p.zeros("den.gamma.l2.b", &[emb]);
        let w0 = c.widths[0];
        p.kaiming("den.conv_in.w", &[w0, self.in_channels, 3, 3], self.in_channels * 9);
        p.zeros("den.conv_in.b", &[w0]);
        let mut cur = w0;
        for (lvl, &w) in c.widths.iter().enumerate() {
            for r in 0..c.res_blocks {
                self.init_res(p, &format!("den.down.{lvl}.{r}"), cur, w);
                cur = w;
            }
        }
        self.init_res(p, "den.mid.0", cur, cur);
        self.init_attention(p, cur);
        self.init_res(p, "den.mid.1", cur, cur);
        for (lvl, &w) in c.widths.iter().enumerate().rev() {
            for r in 0..c.res_blocks {
                let cin = if r == 0 { cur + w } else { w };
                self.init_res(p, &format!("den.up.{lvl}.{r}"), cin, w);
                cur = w;
            }
        }
        p.full("den.out.norm.g", &[w0], 1.0);
        p.zeros("den.out.norm.b", &[w0]);
        p.zeros("den.out.conv.w", &[self.out_channels, w0, 3, 3]);
        p.zeros("den.out.conv.b", &[self.out_channels]);
    }

    fn init_attention<R: Rng>(&self, p: &mut Init<R>, ch: usize) {
        let (ds, k, d) = (self.sem_dim, self.config.sem_tokens, self.config.attn_dim);
        p.full("den.attn.norm.g", &[ch], 1.0);
        p.zeros("den.attn.norm.b", &[ch]);
        p.lecun("den.attn.expand.w", &[ds, k * ds], 1);
        p.lecun("den.attn.q.w", &[ch, d], ch);
        p.lecun("den.attn.k.w", &[ds, d], ds);
        p.zeros("den.attn.k.b", &[d]);
        p.lecun("den.attn.v.w", &[ds, ch], ds);
        p.zeros("den.attn.v.b", &[ch]);
        p.zeros("den.attn.o.w", &[ch, ch]);
    }

    /// Sinusoidal features of `√γ·1000`, `[1, gamma_embed_dim]`.
    pub fn gamma_features<T: Scalar>(&self, gamma: f64) -> Result<Tensor<T>> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Contract(format!("γ = {gamma} outside (0, 1]")));
        }
        let half = self.config.gamma_embed_dim / 2;
        let s = gamma.sqrt() * GAMMA_SCALE;
        let mut v = vec![T::ZERO; 2 * half];
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v[i] = T::from_f64((s * f).sin());
            v[half + i] = T::from_f64((s * f).cos());
        }
        Tensor::from_vec(&[1, 2 * half], v)
    }

    /// Noise-level embedding `[1, 4·widths[0]]`.
    pub fn gamma_embedding_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, gamma: f64) -> Result<Var> {
        let feats = g.constant(self.gamma_features(gamma)?);
        let h = g.linear(feats, p.var("den.gamma.l1.w"), Some(p.var("den.gamma.l1.b")))?;
        let h = g.silu(h);
        g.linear(h, p.var("den.gamma.l2.w"), Some(p.var("den.gamma.l2.b")))
    }

    fn res_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, k: &str, x: Var, emb_act: Var) -> Result<Var> {
        let groups = self.config.groups;
        let h = g.group_norm(x, groups, p.var(&key(k, "norm1.g")), p.var(&key(k, "norm1.b")), GN_EPS)?;
        let h = g.silu(h);
        let h = g.conv2d(h, p.var(&key(k, "conv1.w")), 1, 1)?;
        let h = g.add_channel_bias(h, p.var(&key(k, "conv1.b")))?;
        let e = g.linear(emb_act, p.var(&key(k, "emb.w")), Some(p.var(&key(k, "emb.b"))))?;
        let cout = g.shape(e)[1];
        let e = g.reshape(e, &[cout])?;
        let h = g.add_channel_bias(h, e)?;
        let h = g.group_norm(h, groups, p.var(&key(k, "norm2.g")), p.var(&key(k, "norm2.b")), GN_EPS)?;
        let h = g.silu(h);
        let h = g.conv2d(h, p.var(&key(k, "conv2.w")), 1, 1)?;
        let h = g.add_channel_bias(h, p.var(&key(k, "conv2.b")))?;
        let skip = match p.try_var(&key(k, "skip.w")) {
            Some(w) => {
                let s = g.conv2d(x, w, 1, 0)?;
                g.add_channel_bias(s, p.var(&key(k, "skip.b")))?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        g.check_finite(y, k)?;
        Ok(y)
    }

    /// Residual cross-attention from feature positions to semantic tokens.
    /// Returns the updated map and the attention weights.
    pub fn cross_attention_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, sem: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let [ch, h, w] = shape[..] else {
            return Err(Error::Contract(format!("attention input {shape:?} is not [C, H, W]")));
        };
        if g.shape(sem) != [1, self.sem_dim] {
            return Err(Error::Contract(format!(
                "semantic input {:?}, expected [1, {}]",
                g.shape(sem),
                self.sem_dim
            )));
        }
        let (k, d) = (self.config.sem_tokens, self.config.attn_dim);
        let xn = g.group_norm(x, self.config.groups, p.var("den.attn.norm.g"), p.var("den.attn.norm.b"), GN_EPS)?;
        let flat = g.reshape(xn, &[ch, h * w])?;
        let flat = g.transpose(flat)?;
        let q = g.linear(flat, p.var("den.attn.q.w"), None)?;
        let tokens = g.linear(sem, p.var("den.attn.expand.w"), None)?;
        let tokens = g.reshape(tokens, &[k, self.sem_dim])?;
        let keys = g.linear(tokens, p.var("den.attn.k.w"), Some(p.var("den.attn.k.b")))?;
        let vals = g.linear(tokens, p.var("den.attn.v.w"), Some(p.var("den.attn.v.b")))?;
        let logits = g.matmul_bt(q, keys)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let att = g.softmax_rows(logits)?;
        let o = g.matmul(att, vals)?;
        let o = g.linear(o, p.var("den.attn.o.w"), None)?;
        let o = g.transpose(o)?;
        let o = g.reshape(o, &[ch, h, w])?;
        let y = g.add(x, o)?;
        g.check_finite(y, "den.attn")?;
        Ok((y, att))
    }

    /// Predicted noise for features `s_hat: [C_feat, H, W]`, noise level
    /// `gamma` and semantics `sem: [1, D_sem]`.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s_hat: Var, gamma: f64, sem: Var) -> Result<Forward> {
        let shape = g.shape(s_hat).to_vec();
        let m = self.spatial_multiple();
        match shape[..] {
            [c, h, w] if c == self.in_channels && h % m == 0 && w % m == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::Contract(format!(
                    "denoiser input {shape:?}: need {} channels and sides divisible by {m}",
                    self.in_channels
                )))
            }
        }
        let c = &self.config;
        let emb = self.gamma_embedding_graph(g, p, gamma)?;
        let emb_act = g.silu(emb);
        let h = g.conv2d(s_hat, p.var("den.conv_in.w"), 1, 1)?;
        let mut h = g.add_channel_bias(h, p.var("den.conv_in.b"))?;
        let mut skips = Vec::with_capacity(c.widths.len());
        for lvl in 0..c.widths.len() {
            for r in 0..c.res_blocks {
                h = self.res_graph(g, p, &format!("den.down.{lvl}.{r}"), h, emb_act)?;
            }
            skips.push(h);
            if lvl + 1 < c.widths.len() {
                h = g.avg_pool2(h)?;
            }
        }
        h = self.res_graph(g, p, "den.mid.0", h, emb_act)?;
        let (hh, attention) = self.cross_attention_graph(g, p, h, sem)?;
        h = self.res_graph(g, p, "den.mid.1", hh, emb_act)?;
        for lvl in (0..c.widths.len()).rev() {
            h = g.concat(&[h, skips[lvl]])?;
            for r in 0..c.res_blocks {
                h = self.res_graph(g, p, &format!("den.up.{lvl}.{r}"), h, emb_act)?;
            }
            if lvl > 0 {
                h = g.upsample2(h)?;
            }
        }
        let h = g.group_norm(h, c.groups, p.var("den.out.norm.g"), p.var("den.out.norm.b"), GN_EPS)?;
        let h = g.silu(h);
        let h = g.conv2d(h, p.var("den.out.conv.w"), 1, 1)?;
        let eps = g.add_channel_bias(h, p.var("den.out.conv.b"))?;
        g.check_finite(eps, "den.out")?;
        Ok(Forward { eps, attention })
    }

    pub fn gamma_embedding<T: Scalar>(&self, params: &ParamStore<T>, gamma: f64) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let e = self.gamma_embedding_graph(&mut g, &p, gamma)?;
        Ok(g.value(e).clone())
    }

    /// Cross-attention on its own; returns the map and the attention weights.
    pub fn cross_attention<T: Scalar>(&self, params: &ParamStore<T>, features: &Tensor<T>, sem: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(features.clone());
        let s = g.constant(sem.clone());
        let (y, att) = self.cross_attention_graph(&mut g, &p, x, s)?;
        Ok((g.value(y).clone(), g.value(att).clone()))
    }

    pub fn denoise<T: Scalar>(&self, params: &ParamStore<T>, s_hat: &Tensor<T>, gamma: f64, sem: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(s_hat.clone());
        let s = g.constant(sem.clone());
        let out = self.forward_graph(&mut g, &p, x, gamma, s)?;
        Ok(g.value(out.eps).clone())
    }
}
