//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with a
//! backward closure. Nodes are appended in evaluation order, so walking the
//! tape backwards is a valid topological order. Models process one sample
//! per graph; batching happens by accumulating parameter gradients across
//! graphs (see [`crate::nn`]).
//!
//! Layout conventions: images are `[C, H, W]`, sequences and matrices are
//! `[rows, cols]`, vectors used as per-channel biases are `[C]`.

use crate::error::{Error, Result};
use crate::ssm;
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients of a scalar with respect to leaf nodes.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward closures (inference).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], back: F) -> Var
    where
        F: Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(back))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fails with a numeric fault naming `layer` if `v` holds a non-finite value.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        let t = self.value(v);
        if let Some(pos) = t.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericFault {
                layer: layer.to_string(),
                detail: format!(
                    "non-finite value {:?} at flat index {pos} of {:?}",
                    t.data()[pos],
                    t.shape()
                ),
            });
        }
        Ok(())
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let ctx = BackCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                needs: &needs,
            };
            let pgrads = back(&ctx);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |c| {
            vec![Some(c.grad.clone()), Some(c.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], |c| {
            vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], |c| {
            vec![
                c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |c| vec![Some(c.grad.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], |c| vec![Some(c.grad.clone())])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, &[a], |c| {
            let two = T::from_f64(2.0);
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| two * g * x))]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, &[a], |c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y))])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, &[a], |c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                let s = sigmoid(x);
                g * s * (T::ONE + x * (T::ONE - s))
            }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, &[a], |c| {
            vec![Some(c.grad.zip_map(c.output, |g, s| g * s * (T::ONE - s)))]
        })
    }

    /// `ln(1 + eˣ)`, the positivity map used for step sizes.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, &[a], |c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * sigmoid(x)))]
        })
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |c| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let out = Tensor::scalar(self.value(a).sum() / T::from_f64(n as f64));
        self.push(out, &[a], move |c| {
            vec![Some(Tensor::full(
                c.inputs[0].shape(),
                c.grad[0] / T::from_f64(n as f64),
            ))]
        })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::from_f64(self.value(a).len().max(1) as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), &[a, b], move |c| {
            let k = T::from_f64(2.0) * c.grad[0] / n;
            let d = c.inputs[0].zip_map(c.inputs[1], |x, y| k * (x - y));
            vec![Some(d.clone()), Some(d.map(|v| -v))]
        }))
    }

    /// `[C, H, W] → [1, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (ch, h, w) = self.value(x).dims3()?;
        let s = h * w;
        let inv = T::ONE / T::from_f64(s as f64);
        let xv = self.value(x).data();
        let out: Vec<T> = (0..ch)
            .map(|c| xv[c * s..(c + 1) * s].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[1, ch], out)?;
        Ok(self.push(out, &[x], move |c| {
            let mut g = Tensor::zeros(&[ch, h, w]);
            for (ci, chunk) in g.data_mut().chunks_mut(s).enumerate() {
                let v = c.grad[ci] * inv;
                chunk.iter_mut().for_each(|e| *e = v);
            }
            vec![Some(g)]
        }))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let orig = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], move |c| {
            vec![Some(c.grad.clone().reshape(&orig).expect("reshape back"))]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let out = transpose2(self.value(a).data(), m, n);
        let out = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(out, &[a], move |c| {
            vec![Some(
                Tensor::from_vec(&[m, n], transpose2(c.grad.data(), n, m)).expect("transpose"),
            )]
        }))
    }

    /// Concatenates along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat of nothing"));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(contract(format!(
                    "concat: trailing dims {:?} vs {tail:?}",
                    &s[1..]
                )));
            }
            lead.push(s[0]);
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(&tail);
        let inner: usize = tail.iter().product();
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, parts, move |c| {
            let mut off = 0;
            lead.iter()
                .enumerate()
                .map(|(i, &l)| {
                    let n = l * inner;
                    let g = c.needs[i].then(|| {
                        Tensor::from_vec(c.inputs[i].shape(), c.grad.data()[off..off + n].to_vec())
                            .expect("concat grad")
                    });
                    off += n;
                    g
                })
                .collect()
        }))
    }

    /// Rows `start..start + len` of the leading dimension.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if start + len > shape[0] {
            return Err(contract(format!(
                "slice {start}..{} out of {}",
                start + len,
                shape[0]
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut oshape = shape.clone();
        oshape[0] = len;
        let out = Tensor::from_vec(&oshape, data)?;
        Ok(self.push(out, &[a], move |c| {
            let mut g = Tensor::zeros(&shape);
            g.data_mut()[start * inner..(start + len) * inner].copy_from_slice(c.grad.data());
            vec![Some(g)]
        }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(contract(format!("slice_cols {start}+{len} > {n}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_vec(&[m, len], data)?;
        Ok(self.push(out, &[a], move |c| {
            let mut g = Tensor::zeros(&[m, n]);
            for r in 0..m {
                g.data_mut()[r * n + start..r * n + start + len]
                    .copy_from_slice(&c.grad.data()[r * len..(r + 1) * len]);
            }
            vec![Some(g)]
        }))
    }

    /// Reverses the order along the leading dimension.
    pub fn reverse(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let inner: usize = shape[1..].iter().product();
        let out = Tensor::from_vec(&shape, reverse_rows(self.value(a).data(), inner))
            .expect("reverse");
        self.push(out, &[a], move |c| {
            vec![Some(
                Tensor::from_vec(&shape, reverse_rows(c.grad.data(), inner)).expect("reverse"),
            )]
        })
    }

    /// `[C, H, W] → [J, C·P·P]`, tokens in row-major grid order, features in
    /// `(c, py, px)` order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (ch, h, w) = self.value(x).dims3()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(contract(format!(
                "image {h}×{w} not divisible into {patch}×{patch} patches"
            )));
        }
        let out = patchify_raw(self.value(x).data(), ch, h, w, patch);
        let j = (h / patch) * (w / patch);
        let out = Tensor::from_vec(&[j, ch * patch * patch], out)?;
        Ok(self.push(out, &[x], move |c| {
            let g = unpatchify_raw(c.grad.data(), ch, h, w, patch);
            vec![Some(Tensor::from_vec(&[ch, h, w], g).expect("unpatchify"))]
        }))
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, tokens: Var, ch: usize, h: usize, w: usize, patch: usize) -> Result<Var> {
        let (j, f) = self.value(tokens).dims2()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 || j != (h / patch) * (w / patch) || f != ch * patch * patch {
            return Err(contract(format!(
                "cannot unpatchify [{j}, {f}] into [{ch}, {h}, {w}] with patch {patch}"
            )));
        }
        let out = unpatchify_raw(self.value(tokens).data(), ch, h, w, patch);
        let out = Tensor::from_vec(&[ch, h, w], out)?;
        Ok(self.push(out, &[tokens], move |c| {
            let g = patchify_raw(c.grad.data(), ch, h, w, patch);
            vec![Some(Tensor::from_vec(&[j, f], g).expect("patchify"))]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (ch, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; ch * h2 * w2];
        for c in 0..ch {
            for y in 0..h2 {
                let srow = &src[(c * h + y / 2) * w..(c * h + y / 2 + 1) * w];
                let orow = &mut out[(c * h2 + y) * w2..(c * h2 + y + 1) * w2];
                for (xx, o) in orow.iter_mut().enumerate() {
                    *o = srow[xx / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[ch, h2, w2], out)?;
        Ok(self.push(out, &[x], move |c| {
            let gd = c.grad.data();
            let mut g = vec![T::ZERO; ch * h * w];
            for cc in 0..ch {
                for y in 0..h2 {
                    let grow = &gd[(cc * h2 + y) * w2..(cc * h2 + y + 1) * w2];
                    let base = (cc * h + y / 2) * w;
                    for (xx, &v) in grow.iter().enumerate() {
                        g[base + xx / 2] += v;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[ch, h, w], g).expect("upsample grad"))]
        }))
    }

    /// 2×2 average pooling of `[C, H, W]` (even H, W).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (ch, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract(format!("avg_pool2 needs even dims, got {h}×{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::from_f64(0.25);
        let mut out = vec![T::ZERO; ch * h2 * w2];
        for c in 0..ch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = (c * h + 2 * y) * w + 2 * xx;
                    out[(c * h2 + y) * w2 + xx] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let out = Tensor::from_vec(&[ch, h2, w2], out)?;
        Ok(self.push(out, &[x], move |c| {
            let gd = c.grad.data();
            let mut g = vec![T::ZERO; ch * h * w];
            for cc in 0..ch {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let v = gd[(cc * h2 + y) * w2 + xx] * q;
                        let i = (cc * h + 2 * y) * w + 2 * xx;
                        g[i] = v;
                        g[i + 1] = v;
                        g[i + w] = v;
                        g[i + w + 1] = v;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[ch, h, w], g).expect("pool grad"))]
        }))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[M, K] · [N, K]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (b0, b1) = self.value(b).dims2()?;
        let (k2, n) = if bt { (b1, b0) } else { (b0, b1) };
        if k != k2 {
            return Err(contract(format!(
                "matmul: [{m}, {k}] with {}[{b0}, {b1}]",
                if bt { "transposed " } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(self.value(a).data(), false, self.value(b).data(), bt, out.data_mut(), m, k, n, false);
        Ok(self.push(out, &[a, b], move |c| {
            let ga = c.needs[0].then(|| {
                // gA = gC · B  (bt)   or   gC · Bᵀ
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(c.grad.data(), false, c.inputs[1].data(), !bt, ga.data_mut(), m, n, k, false);
                ga
            });
            let gb = c.needs[1].then(|| {
                if bt {
                    // gB [N, K] = gCᵀ · A
                    let mut gb = Tensor::zeros(&[n, k]);
                    gemm(c.grad.data(), true, c.inputs[0].data(), false, gb.data_mut(), n, m, k, false);
                    gb
                } else {
                    // gB [K, N] = Aᵀ · gC
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(c.inputs[0].data(), true, c.grad.data(), false, gb.data_mut(), k, m, n, false);
                    gb
                }
            });
            vec![ga, gb]
        }))
    }

    /// Adds a length-`N` bias to every row of `[M, N]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).len() != n {
            return Err(contract(format!(
                "row bias of {} for {n} columns",
                self.value(b).len()
            )));
        }
        let bshape = self.shape(b).to_vec();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        Ok(self.push(out, &[x, b], move |c| {
            let gb = c.needs[1].then(|| {
                let mut gb = vec![T::ZERO; n];
                for row in c.grad.data().chunks(n) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                Tensor::from_vec(&bshape, gb).expect("bias grad")
            });
            let _ = m;
            vec![Some(c.grad.clone()), gb]
        }))
    }

    /// `x · W + b` for `x: [M, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Adds a per-channel bias `[C]` to `[C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let ch = self.shape(x)[0];
        if self.value(b).len() != ch {
            return Err(contract(format!(
                "channel bias of {} for {ch} channels",
                self.value(b).len()
            )));
        }
        let s = self.value(x).len() / ch.max(1);
        let bshape = self.shape(b).to_vec();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, &bb) in out.data_mut().chunks_mut(s).zip(&bv) {
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        Ok(self.push(out, &[x, b], move |c| {
            let gb = c.needs[1].then(|| {
                let gb: Vec<T> = c.grad.data().chunks(s).map(|ch| ch.iter().copied().sum()).collect();
                Tensor::from_vec(&bshape, gb).expect("channel bias grad")
            });
            vec![Some(c.grad.clone()), gb]
        }))
    }

    /// 2-D convolution of `x: [Ci, H, W]` with `w: [Co, Ci, k, k]` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(contract(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if wci != ci || k != k2 || stride == 0 {
            return Err(contract(format!(
                "conv2d: input [{ci}, {h}, {wd}] vs weight {ws:?}, stride {stride}"
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(contract(format!("conv2d: kernel {k} larger than padded input")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ck = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let col = if direct {
            None
        } else {
            let mut col = vec![T::ZERO; ck * ho * wo];
            im2col(self.value(x).data(), ci, h, wd, k, stride, pad, ho, wo, &mut col);
            Some(col)
        };
        let mut out = Tensor::zeros(&[co, ho, wo]);
        {
            let cols: &[T] = col.as_deref().unwrap_or(self.value(x).data());
            gemm(self.value(w).data(), false, cols, false, out.data_mut(), co, ck, ho * wo, false);
        }
        Ok(self.push(out, &[x, w], move |c| {
            let cols: &[T] = col.as_deref().unwrap_or(c.inputs[0].data());
            let gw = c.needs[1].then(|| {
                let mut gw = Tensor::zeros(&[co, ci, k, k]);
                gemm(c.grad.data(), false, cols, true, gw.data_mut(), co, ho * wo, ck, false);
                gw
            });
            let gx = c.needs[0].then(|| {
                let mut gcol = vec![T::ZERO; ck * ho * wo];
                gemm(c.inputs[1].data(), true, c.grad.data(), false, &mut gcol, ck, co, ho * wo, false);
                if direct {
                    Tensor::from_vec(&[ci, h, wd], gcol).expect("conv grad")
                } else {
                    let mut gx = vec![T::ZERO; ci * h * wd];
                    col2im(&gcol, ci, h, wd, k, stride, pad, ho, wo, &mut gx);
                    Tensor::from_vec(&[ci, h, wd], gx).expect("conv grad")
                }
            });
            vec![gx, gw]
        }))
    }

    /// Causal depthwise 1-D convolution along rows of `x: [M, E]` with
    /// `w: [E, K]` and bias `b: [E]`; row `t` sees rows `t-K+1..=t`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, e) = self.value(x).dims2()?;
        let (we, k) = self.value(w).dims2()?;
        if we != e || self.value(b).len() != e {
            return Err(contract(format!(
                "conv1d: input [{m}, {e}], weight [{we}, {k}], bias {}",
                self.value(b).len()
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::ZERO; m * e];
        for t in 0..m {
            let orow = &mut out[t * e..(t + 1) * e];
            orow.copy_from_slice(bv);
            for j in 0..k {
                let Some(src) = (t + j + 1).checked_sub(k) else { continue };
                let xrow = &xv[src * e..(src + 1) * e];
                for ch in 0..e {
                    orow[ch] += wv[ch * k + j] * xrow[ch];
                }
            }
        }
        let bshape = self.shape(b).to_vec();
        let out = Tensor::from_vec(&[m, e], out)?;
        Ok(self.push(out, &[x, w, b], move |c| {
            let g = c.grad.data();
            let xv = c.inputs[0].data();
            let wv = c.inputs[1].data();
            let mut gx = vec![T::ZERO; m * e];
            let mut gw = vec![T::ZERO; e * k];
            let mut gb = vec![T::ZERO; e];
            for t in 0..m {
                let grow = &g[t * e..(t + 1) * e];
                for (acc, &v) in gb.iter_mut().zip(grow) {
                    *acc += v;
                }
                for j in 0..k {
                    let Some(src) = (t + j + 1).checked_sub(k) else { continue };
                    for ch in 0..e {
                        gw[ch * k + j] += grow[ch] * xv[src * e + ch];
                        gx[src * e + ch] += grow[ch] * wv[ch * k + j];
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&[m, e], gx).expect("conv1d gx")),
                Some(Tensor::from_vec(&[e, k], gw).expect("conv1d gw")),
                Some(Tensor::from_vec(&bshape, gb).expect("conv1d gb")),
            ]
        }))
    }

    // ---------------------------------------------------------------- normalization

    /// Group normalization of `x: [C, ...]` with per-channel affine `[C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ch = shape[0];
        if groups == 0 || ch % groups != 0 {
            return Err(contract(format!("group_norm: {ch} channels into {groups} groups")));
        }
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(contract("group_norm: affine size mismatch"));
        }
        let s = self.value(x).len() / ch;
        let gsize = (ch / groups) * s;
        let (xhat, inv_std) = normalize_chunks(self.value(x).data(), gsize, T::from_f64(eps));
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for (c, chunk) in out.chunks_mut(s).enumerate() {
            for v in chunk {
                *v = *v * gv[c] + bv[c];
            }
        }
        let gshape = self.shape(gamma).to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, &[x, gamma, beta], move |c| {
            let g = c.grad.data();
            let gam = c.inputs[1].data();
            let mut ggam = vec![T::ZERO; ch];
            let mut gbet = vec![T::ZERO; ch];
            let mut dxhat = vec![T::ZERO; g.len()];
            for ci in 0..ch {
                for i in ci * s..(ci + 1) * s {
                    ggam[ci] += g[i] * xhat[i];
                    gbet[ci] += g[i];
                    dxhat[i] = g[i] * gam[ci];
                }
            }
            let gx = normalize_backward(&dxhat, &xhat, &inv_std, gsize);
            vec![
                Some(Tensor::from_vec(&shape, gx).expect("gn gx")),
                Some(Tensor::from_vec(&gshape, ggam).expect("gn gamma")),
                Some(Tensor::from_vec(&gshape, gbet).expect("gn beta")),
            ]
        }))
    }

    /// Layer normalization over the columns of `x: [M, N]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(contract("layer_norm: affine size mismatch"));
        }
        let (xhat, inv_std) = normalize_chunks(self.value(x).data(), n, T::from_f64(eps));
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[j] + bv[j];
            }
        }
        let gshape = self.shape(gamma).to_vec();
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, &[x, gamma, beta], move |c| {
            let g = c.grad.data();
            let gam = c.inputs[1].data();
            let mut ggam = vec![T::ZERO; n];
            let mut gbet = vec![T::ZERO; n];
            let mut dxhat = vec![T::ZERO; g.len()];
            for (i, (&gi, &xi)) in g.iter().zip(&xhat).enumerate() {
                let j = i % n;
                ggam[j] += gi * xi;
                gbet[j] += gi;
                dxhat[i] = gi * gam[j];
            }
            let gx = normalize_backward(&dxhat, &xhat, &inv_std, n);
            vec![
                Some(Tensor::from_vec(&[m, n], gx).expect("ln gx")),
                Some(Tensor::from_vec(&gshape, ggam).expect("ln gamma")),
                Some(Tensor::from_vec(&gshape, gbet).expect("ln beta")),
            ]
        }))
    }

    /// Scales each row of `[M, N]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let eps = T::from_f64(eps);
        let norms: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let mut out = self.value(x).clone();
        for (row, &nr) in out.data_mut().chunks_mut(n).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= nr);
        }
        Ok(self.push(out, &[x], move |c| {
            let mut gx = vec![T::ZERO; m * n];
            for r in 0..m {
                let y = &c.output.data()[r * n..(r + 1) * n];
                let g = &c.grad.data()[r * n..(r + 1) * n];
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    gx[r * n + j] = (g[j] - y[j] * dot) / norms[r];
                }
            }
            vec![Some(Tensor::from_vec(&[m, n], gx).expect("l2 grad"))]
        }))
    }

    // ---------------------------------------------------------------- attention / losses

    /// Row-wise softmax of `[M, N]`.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(out, &[x], move |c| {
            let mut gx = vec![T::ZERO; m * n];
            for r in 0..m {
                let y = &c.output.data()[r * n..(r + 1) * n];
                let g = &c.grad.data()[r * n..(r + 1) * n];
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    gx[r * n + j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(Tensor::from_vec(&[m, n], gx).expect("softmax grad"))]
        }))
    }

    /// Mean cross-entropy of row logits `[M, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.value(logits).dims2()?;
        if targets.len() != m || targets.iter().any(|&t| t >= k) {
            return Err(contract(format!(
                "cross_entropy: {} targets for [{m}, {k}] logits",
                targets.len()
            )));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = T::ZERO;
        for (row, &t) in probs.data_mut().chunks_mut(k).zip(targets) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let mf = T::from_f64(m as f64);
        let targets = targets.to_vec();
        Ok(self.push(Tensor::scalar(loss / mf), &[logits], move |c| {
            let scale = c.grad[0] / mf;
            let mut g = probs.clone();
            for (row, &t) in g.data_mut().chunks_mut(k).zip(&targets) {
                row[t] -= T::ONE;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            vec![Some(g)]
        }))
    }

    /// Selective state-space scan with per-position parameters.
    ///
    /// `u, delta: [M, E]`, `a: [E, N]` (continuous, ≤ 0), `b, c: [M, N]`,
    /// `d: [E]` skip weights. Returns `y: [M, E]`; see [`ssm::selective_scan_raw`].
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (m, e) = self.value(u).dims2()?;
        let (ae, n) = self.value(a).dims2()?;
        let ok = self.shape(delta) == [m, e]
            && ae == e
            && self.shape(b) == [m, n]
            && self.shape(c) == [m, n]
            && self.value(d).len() == e;
        if !ok {
            return Err(contract(format!(
                "selective_scan: u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                self.shape(u),
                self.shape(delta),
                self.shape(a),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            )));
        }
        let dims = ssm::ScanDims { len: m, channels: e, state: n };
        let (y, states) = ssm::selective_scan_raw(
            dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            self.grad_enabled,
        );
        let dshape = self.shape(d).to_vec();
        let out = Tensor::from_vec(&[m, e], y)?;
        Ok(self.push(out, &[u, delta, a, b, c, d], move |cx| {
            let g = ssm::selective_scan_backward(
                dims,
                cx.inputs[0].data(),
                cx.inputs[1].data(),
                cx.inputs[2].data(),
                cx.inputs[3].data(),
                cx.inputs[4].data(),
                cx.inputs[5].data(),
                &states,
                cx.grad.data(),
            );
            vec![
                Some(Tensor::from_vec(&[m, e], g.u).expect("scan gu")),
                Some(Tensor::from_vec(&[m, e], g.delta).expect("scan gdelta")),
                Some(Tensor::from_vec(&[e, n], g.a).expect("scan ga")),
                Some(Tensor::from_vec(&[m, n], g.b).expect("scan gb")),
                Some(Tensor::from_vec(&[m, n], g.c).expect("scan gc")),
                Some(Tensor::from_vec(&dshape, g.d).expect("scan gd")),
            ]
        }))
    }
}

// -------------------------------------------------------------------- helpers

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::from_f64(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn transpose2<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn reverse_rows<T: Scalar>(src: &[T], inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    if inner == 0 {
        return out;
    }
    for row in src.chunks(inner).rev() {
        out.extend_from_slice(row);
    }
    out
}

/// Standardizes consecutive chunks of `size`; returns `(xhat, 1/std per chunk)`.
fn normalize_chunks<T: Scalar>(x: &[T], size: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let nf = T::from_f64(size as f64);
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv = Vec::with_capacity(x.len() / size.max(1));
    for (chunk, out) in x.chunks(size).zip(xhat.chunks_mut(size)) {
        let mean = chunk.iter().copied().sum::<T>() / nf;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::ONE / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

fn normalize_backward<T: Scalar>(dxhat: &[T], xhat: &[T], inv_std: &[T], size: usize) -> Vec<T> {
    let nf = T::from_f64(size as f64);
    let mut gx = vec![T::ZERO; dxhat.len()];
    for (((d, xh), out), &is) in dxhat
        .chunks(size)
        .zip(xhat.chunks(size))
        .zip(gx.chunks_mut(size))
        .zip(inv_std)
    {
        let md = d.iter().copied().sum::<T>() / nf;
        let mdx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for ((o, &di), &xi) in out.iter_mut().zip(d).zip(xh) {
            *o = is * (di - md - xi * mdx);
        }
    }
    gx
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let srow = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix >= 0 && ix < w as isize {
                            srow[ix as usize]
                        } else {
                            T::ZERO
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn patchify_raw<T: Scalar>(x: &[T], ch: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let gw = w / p;
    let f = ch * p * p;
    let mut out = vec![T::ZERO; (h / p) * gw * f];
    for c in 0..ch {
        for y in 0..h {
            for xx in 0..w {
                let tok = (y / p) * gw + xx / p;
                let feat = (c * p + y % p) * p + xx % p;
                out[tok * f + feat] = x[(c * h + y) * w + xx];
            }
        }
    }
    out
}

fn unpatchify_raw<T: Scalar>(tokens: &[T], ch: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let gw = w / p;
    let f = ch * p * p;
    let mut out = vec![T::ZERO; ch * h * w];
    for c in 0..ch {
        for y in 0..h {
            for xx in 0..w {
                let tok = (y / p) * gw + xx / p;
                let feat = (c * p + y % p) * p + xx % p;
                out[(c * h + y) * w + xx] = tokens[tok * f + feat];
            }
        }
    }
    out
}
