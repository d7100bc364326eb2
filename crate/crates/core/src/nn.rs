//! Parameter storage, initialisation and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors, ordered by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) {
        self.map.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.map.extend(other.map);
    }

    /// Entries whose key starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that `self` holds exactly the keys and shapes of `spec`.
    pub fn check_layout(&self, spec: &[(String, Vec<usize>)]) -> Result<()> {
        for (k, shape) in spec {
            match self.map.get(k) {
                None => return Err(Error::Contract(format!("missing parameter {k}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Contract(format!(
                        "parameter {k} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if self.map.len() != spec.len() {
            let known: std::collections::BTreeSet<_> = spec.iter().map(|(k, _)| k).collect();
            let extra: Vec<_> = self.map.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Contract(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `key`.
    ///
    /// Panics when the key is missing; stores are validated against the
    /// model layout before binding.
    pub fn var(&self, key: &str) -> Var {
        match self.vars.get(key) {
            Some(v) => *v,
            None => panic!("parameter {key} not bound"),
        }
    }

    pub fn try_var(&self, key: &str) -> Option<Var> {
        self.vars.get(key).copied()
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, grads: &mut Grads<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, &v) in &self.vars {
            let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.insert(k.clone(), t);
        }
        out
    }
}

/// Builds a parameter layout and initial values in one pass.
pub struct Init<'r, R: Rng> {
    rng: &'r mut R,
    store: ParamStore<f64>,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            rng,
            store: ParamStore::new(),
        }
    }

    pub fn zeros(&mut self, key: impl Into<String>, shape: &[usize]) {
        self.store.insert(key, Tensor::zeros(shape));
    }

    pub fn full(&mut self, key: impl Into<String>, shape: &[usize], v: f64) {
        self.store.insert(key, Tensor::full(shape, v));
    }

    pub fn normal(&mut self, key: impl Into<String>, shape: &[usize], std: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                std * z
            })
            .collect();
        self.store.insert(key, Tensor::from_vec(shape, data).expect("shape"));
    }

    /// He-normal with gain √2 over `fan_in`.
    pub fn kaiming(&mut self, key: impl Into<String>, shape: &[usize], fan_in: usize) {
        self.normal(key, shape, (2.0 / fan_in.max(1) as f64).sqrt());
    }

    /// `std = 1/√fan_in`, for layers not followed by a ReLU-like activation.
    pub fn lecun(&mut self, key: impl Into<String>, shape: &[usize], fan_in: usize) {
        self.normal(key, shape, (1.0 / fan_in.max(1) as f64).sqrt());
    }

    pub fn uniform(&mut self, key: impl Into<String>, shape: &[usize], lo: f64, hi: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.store.insert(key, Tensor::from_vec(shape, data).expect("shape"));
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<f64>) {
        self.store.insert(key, t);
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn finish<T: Scalar>(self) -> ParamStore<T> {
        self.store.cast()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update; `grads` must cover the same keys as `params`.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (k, g) in grads.iter() {
            let p = params
                .map
                .get_mut(k)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {k}")))?;
            let m = self.m.map.entry(k.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.map.entry(k.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for {k}")));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= step_size * md[i] / (vd[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
