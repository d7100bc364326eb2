//! Bidirectional selective-scan encoder over image patches.
//!
//! The seven-channel stack `x_up ⊕ y_up ⊕ f_t` is cut into `P×P` patches,
//! linearly embedded, prefixed with a class token and given a learned
//! positional embedding. Each block normalises the tokens, projects them to
//! a scan branch `v` and a gate branch `u`, runs a causal depthwise
//! convolution and a selective scan over `v` in both directions, gates both
//! results with `SiLU(u)`, sums them, projects back and adds the residual.
//! After the last block the class token is dropped and every patch token is
//! expanded back to its `P×P` footprint of `C_feat` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::ssm::{selective_scan_graph, SelectiveVars};
use crate::tensor::{Scalar, Tensor};

/// Position of the class token in a [`TokenSequence`].
pub const CLS_INDEX: usize = 0;
/// Channels of the joint input `x (3) ⊕ y (1) ⊕ f_t (3)`.
pub const JOINT_CHANNELS: usize = 7;
const LN_EPS: f64 = 1e-5;
const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfmConfig {
    pub patch: usize,
    /// Token width `D`.
    pub dim: usize,
    pub depth: usize,
    /// State size `N` per channel.
    pub state: usize,
    pub conv_kernel: usize,
    /// Channels of the realigned feature map.
    pub feat_channels: usize,
}

impl Default for BfmConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 96,
            depth: 2,
            state: 8,
            conv_kernel: 3,
            feat_channels: 32,
        }
    }
}

/// Patch tokens plus class token at [`CLS_INDEX`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `[J + 1, D]`
    pub tokens: Tensor<T>,
    pub patch: usize,
    /// `(H / P, W / P)`
    pub grid: (usize, usize),
}

impl<T: Scalar> TokenSequence<T> {
    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Spatial feature map `[C_feat, H, W]` realigned from the tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRepresentation<T> {
    pub features: Tensor<T>,
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bfm {
    pub config: BfmConfig,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Bfm {
    /// Encoder for `in_channels × height × width` inputs.
    pub fn new(config: BfmConfig, in_channels: usize, height: usize, width: usize) -> Result<Self> {
        let c = &config;
        if c.patch == 0 || c.dim == 0 || c.state == 0 || c.conv_kernel == 0 || c.feat_channels == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if height == 0 || width == 0 || height % c.patch != 0 || width % c.patch != 0 {
            return Err(Error::Config(format!(
                "{height}×{width} input not divisible by patch {}",
                c.patch
            )));
        }
        Ok(Self {
            config,
            in_channels,
            height,
            width,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.config.patch, self.width / self.config.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Adds freshly initialised parameters under `bfm.`.
    pub fn init<R: Rng>(&self, p: &mut Init<R>) {
        let c = &self.config;
        let (d, n, pp) = (c.dim, c.state, c.patch * c.patch);
        let fan = self.in_channels * pp;
        p.lecun("bfm.embed.w", &[fan, d], fan);
        p.normal("bfm.embed.cls", &[1, d], 0.02);
        p.normal("bfm.embed.pos", &[self.tokens() + 1, d], 0.02);
        for l in 0..c.depth {
            let k = format!("bfm.blocks.{l}");
            p.full(format!("{k}.norm.g"), &[d], 1.0);
            p.zeros(format!("{k}.norm.b"), &[d]);
            p.lecun(format!("{k}.in_v"), &[d, d], d);
            p.lecun(format!("{k}.in_u"), &[d, d], d);
            p.lecun(format!("{k}.out"), &[d, d], d);
            for dir in DIRECTIONS {
                let k = format!("{k}.{dir}");
                p.lecun(format!("{k}.conv.w"), &[d, c.conv_kernel], c.conv_kernel);
                p.zeros(format!("{k}.conv.b"), &[d]);
                p.lecun(format!("{k}.x_b.w"), &[d, n], d);
                p.zeros(format!("{k}.x_b.b"), &[n]);
                p.lecun(format!("{k}.x_c.w"), &[d, n], d);
                p.zeros(format!("{k}.x_c.b"), &[n]);
                p.normal(format!("{k}.dt.w"), &[d, d], 0.1 / (d as f64).sqrt());
                p.full(format!("{k}.dt.b"), &[d], softplus_inv(0.01));
                let a_log = (0..d * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect();
                p.insert(format!("{k}.a_log"), Tensor::from_vec(&[d, n], a_log).expect("shape"));
                p.full(format!("{k}.d"), &[d], 1.0);
            }
        }
        p.full("bfm.norm.g", &[d], 1.0);
        p.zeros("bfm.norm.b", &[d]);
        p.lecun("bfm.realign.w", &[d, c.feat_channels * pp], d);
        p.zeros("bfm.realign.b", &[c.feat_channels * pp]);
    }

    fn check_input<T: Scalar>(&self, s: &Tensor<T>) -> Result<()> {
        if s.shape() != [self.in_channels, self.height, self.width] {
            return Err(Error::Contract(format!(
                "encoder expects [{}, {}, {}], got {:?}",
                self.in_channels,
                self.height,
                self.width,
                s.shape()
            )));
        }
        Ok(())
    }

    /// Tokens `[J + 1, D]` of the stacked input `s: [C, H, W]`.
    pub fn patch_embed_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let patches = g.patchify(s, self.config.patch)?;
        let emb = g.linear(patches, p.var("bfm.embed.w"), None)?;
        let tokens = g.concat(&[p.var("bfm.embed.cls"), emb])?;
        g.add(tokens, p.var("bfm.embed.pos"))
    }

    /// One bidirectional block over `x: [M, D]`.
    pub fn block_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, l: usize, x: Var) -> Result<Var> {
        let k = format!("bfm.blocks.{l}");
        let h = g.layer_norm(x, p.var(&format!("{k}.norm.g")), p.var(&format!("{k}.norm.b")), LN_EPS)?;
        let v = g.linear(h, p.var(&format!("{k}.in_v")), None)?;
        let u = g.linear(h, p.var(&format!("{k}.in_u")), None)?;
        let gate = g.silu(u);
        let mut gated = Vec::with_capacity(2);
        for dir in DIRECTIONS {
            let y = self.direction_graph(g, p, &format!("{k}.{dir}"), v, dir == "bwd")?;
            gated.push(g.mul(y, gate)?);
        }
        let sum = g.add(gated[0], gated[1])?;
        let out = g.linear(sum, p.var(&format!("{k}.out")), None)?;
        let y = g.add(x, out)?;
        g.check_finite(y, &k)?;
        Ok(y)
    }

    /// Convolution and selective scan of `v` in one direction.
    fn direction_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, k: &str, v: Var, backward: bool) -> Result<Var> {
        let vin = if backward { g.reverse(v) } else { v };
        let c = g.conv1d_causal(vin, p.var(&format!("{k}.conv.w")), p.var(&format!("{k}.conv.b")))?;
        let c = g.silu(c);
        let vars = SelectiveVars {
            w_b: p.var(&format!("{k}.x_b.w")),
            b_b: p.var(&format!("{k}.x_b.b")),
            w_c: p.var(&format!("{k}.x_c.w")),
            b_c: p.var(&format!("{k}.x_c.b")),
            w_delta: p.var(&format!("{k}.dt.w")),
            b_delta: p.var(&format!("{k}.dt.b")),
            a_log: p.var(&format!("{k}.a_log")),
            d: p.var(&format!("{k}.d")),
        };
        let y = selective_scan_graph(g, c, &vars)?;
        Ok(if backward { g.reverse(y) } else { y })
    }

    /// Tokens after all blocks and the final normalisation.
    pub fn tokens_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let mut t = self.patch_embed_graph(g, p, s)?;
        for l in 0..self.config.depth {
            t = self.block_graph(g, p, l, t)?;
        }
        g.layer_norm(t, p.var("bfm.norm.g"), p.var("bfm.norm.b"), LN_EPS)
    }

    /// `[C_feat, H, W]` features of an already stacked input.
    pub fn encode_stacked_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let t = self.tokens_graph(g, p, s)?;
        let patches = g.slice(t, CLS_INDEX + 1, self.tokens())?;
        let f = g.linear(patches, p.var("bfm.realign.w"), Some(p.var("bfm.realign.b")))?;
        let out = g.unpatchify(f, self.config.feat_channels, self.height, self.width, self.config.patch)?;
        g.check_finite(out, "bfm.realign")?;
        Ok(out)
    }

    /// `[C_feat, H, W]` features of `x_up ⊕ y_up ⊕ f_t`.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x_up: Var, y_up: Var, f_t: Var) -> Result<Var> {
        let s = g.concat(&[x_up, y_up, f_t])?;
        if g.shape(s)[0] != self.in_channels {
            return Err(Error::Contract(format!(
                "stacked input has {} channels, encoder expects {}",
                g.shape(s)[0],
                self.in_channels
            )));
        }
        self.encode_stacked_graph(g, p, s)
    }

    pub fn patch_embed<T: Scalar>(&self, params: &ParamStore<T>, s: &Tensor<T>) -> Result<TokenSequence<T>> {
        self.check_input(s)?;
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let sv = g.constant(s.clone());
        let t = self.patch_embed_graph(&mut g, &p, sv)?;
        Ok(TokenSequence {
            tokens: g.value(t).clone(),
            patch: self.config.patch,
            grid: self.grid(),
        })
    }

    pub fn block<T: Scalar>(&self, params: &ParamStore<T>, l: usize, seq: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        if l >= self.config.depth {
            return Err(Error::Contract(format!("block {l} of {}", self.config.depth)));
        }
        let (_, d) = seq.tokens.dims2()?;
        if d != self.config.dim {
            return Err(Error::Contract(format!("tokens of width {d}, expected {}", self.config.dim)));
        }
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(seq.tokens.clone());
        let y = self.block_graph(&mut g, &p, l, x)?;
        Ok(TokenSequence {
            tokens: g.value(y).clone(),
            ..seq.clone()
        })
    }

    pub fn encode<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x_up: &Tensor<T>,
        y_up: &Tensor<T>,
        f_t: &Tensor<T>,
    ) -> Result<JointRepresentation<T>> {
        let hw = [self.height, self.width];
        for (name, t, c) in [("x", x_up, 3), ("y", y_up, 1), ("f_t", f_t, 3)] {
            if t.shape().len() != 3 || t.shape()[0] != c || t.shape()[1..] != hw {
                return Err(Error::Contract(format!(
                    "{name} has shape {:?}, expected [{c}, {}, {}]",
                    t.shape(),
                    self.height,
                    self.width
                )));
            }
        }
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let (x, y, f) = (g.constant(x_up.clone()), g.constant(y_up.clone()), g.constant(f_t.clone()));
        let out = self.encode_graph(&mut g, &p, x, y, f)?;
        Ok(JointRepresentation {
            features: g.value(out).clone(),
        })
    }
}
