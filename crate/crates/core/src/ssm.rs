//! State-space sequence models: zero-order-hold discretization, the
//! recurrent and convolutional scans for fixed parameters, and the
//! selective scan whose `B`, `C` and step size vary per position.
//!
//! The evolution matrix is diagonal with non-positive entries, so every
//! matrix exponential below is elementwise.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this `|Δ·A|` the input projection uses its first-order limit `Δ·B`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Continuous-time parameters of a single-input single-output SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// Diagonal of the evolution matrix, entries ≤ 0.
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    /// Time step, > 0.
    pub delta: T,
}

impl<T: Scalar> SsmParams<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, c: Vec<T>, delta: T) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() || a.len() != c.len() {
            return Err(Error::Contract(format!(
                "state size mismatch: A {}, B {}, C {}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        if let Some(v) = a.iter().find(|v| **v > T::ZERO || !v.is_finite()) {
            return Err(Error::Contract(format!("evolution entry {v:?} must be ≤ 0")));
        }
        Ok(Self { a, b, c, delta })
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }
}

/// Discretized parameters; build with [`discretize`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
}

/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`.
pub fn discretize<T: Scalar>(p: &SsmParams<T>) -> Result<DiscreteSsm<T>> {
    if !(p.delta > T::ZERO) || !p.delta.is_finite() {
        return Err(Error::Contract(format!("step size {:?} must be > 0", p.delta)));
    }
    let (a_bar, b_bar) = p
        .a
        .iter()
        .zip(&p.b)
        .map(|(&a, &b)| {
            let x = p.delta * a;
            (x.exp(), zoh_phi(p.delta, a) * b)
        })
        .unzip();
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
    })
}

/// `(exp(δa) − 1)/a`, i.e. `B̄/B` under zero-order hold.
#[inline]
pub fn zoh_phi<T: Scalar>(delta: T, a: T) -> T {
    let x = delta * a;
    if x.abs().to_f64() < ZOH_LIMIT {
        delta
    } else {
        x.exp_m1() / a
    }
}

/// `(Ā, φ, x, Ā − 1)` at `x = δa` from a single `expm1`.
#[inline]
fn zoh_pair<T: Scalar>(delta: T, a: T) -> (T, T, T, T) {
    let x = delta * a;
    let em = x.exp_m1();
    let phi = if x.abs().to_f64() < ZOH_LIMIT { delta } else { em / a };
    (T::ONE + em, phi, x, em)
}

/// `∂φ/∂a` for [`zoh_phi`] given `Ā = exp(x)` and `em = Ā − 1`, series-expanded near zero.
#[inline]
fn zoh_phi_da<T: Scalar>(delta: T, a: T, x: T, abar: T, em: T) -> T {
    if x.abs().to_f64() < 1e-3 {
        let half = T::from_f64(0.5);
        let third = T::from_f64(1.0 / 3.0);
        let eighth = T::from_f64(0.125);
        delta * delta * (half + x * third + x * x * eighth)
    } else {
        (x * abar - em) / (a * a)
    }
}

/// Parameters for a scan: fixed, or one discretization per position.
#[derive(Clone, Debug)]
pub enum ScanParams<T> {
    Fixed(DiscreteSsm<T>),
    Selective(Vec<DiscreteSsm<T>>),
}

impl<T> From<DiscreteSsm<T>> for ScanParams<T> {
    fn from(s: DiscreteSsm<T>) -> Self {
        ScanParams::Fixed(s)
    }
}

/// `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t`, from `h_0 = 0`.
pub fn scan_recurrent<T: Scalar>(params: &ScanParams<T>, x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Contract("scan over an empty sequence".into()));
    }
    let step_params = |t: usize| -> Result<&DiscreteSsm<T>> {
        match params {
            ScanParams::Fixed(s) => Ok(s),
            ScanParams::Selective(v) => v.get(t).ok_or_else(|| {
                Error::Contract(format!("{} per-position parameters for length {}", v.len(), x.len()))
            }),
        }
    };
    let n = step_params(0)?.a_bar.len();
    let mut h = vec![T::ZERO; n];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let s = step_params(t)?;
        if s.a_bar.len() != n || s.b_bar.len() != n || s.c.len() != n {
            return Err(Error::Contract("inconsistent state size across positions".into()));
        }
        let mut acc = T::ZERO;
        for i in 0..n {
            h[i] = s.a_bar[i] * h[i] + s.b_bar[i] * xt;
            acc += s.c[i] * h[i];
        }
        y.push(acc);
    }
    Ok(y)
}

/// The structured kernel `K̄ = (C B̄, C Ā B̄, …, C Ā^{len−1} B̄)`.
pub fn conv_kernel<T: Scalar>(ssm: &DiscreteSsm<T>, len: usize) -> Vec<T> {
    let mut pow: Vec<T> = vec![T::ONE; ssm.a_bar.len()];
    (0..len)
        .map(|_| {
            let k = pow
                .iter()
                .zip(&ssm.b_bar)
                .zip(&ssm.c)
                .map(|((&p, &b), &c)| c * p * b)
                .sum();
            for (p, &a) in pow.iter_mut().zip(&ssm.a_bar) {
                *p *= a;
            }
            k
        })
        .collect()
}

/// Causal convolution `y = x ∗ K̄`; only defined for fixed parameters.
pub fn scan_conv<T: Scalar>(params: &ScanParams<T>, x: &[T]) -> Result<Vec<T>> {
    let ssm = match params {
        ScanParams::Fixed(s) => s,
        ScanParams::Selective(_) => {
            return Err(Error::Unsupported(
                "convolutional scan requires time-invariant parameters".into(),
            ))
        }
    };
    if x.is_empty() {
        return Err(Error::Contract("scan over an empty sequence".into()));
    }
    let k = conv_kernel(ssm, x.len());
    Ok((0..x.len())
        .map(|t| (0..=t).map(|j| k[j] * x[t - j]).sum())
        .collect())
}

// ------------------------------------------------------------------------ selective

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Forward selective scan over `E` independent channels sharing `B_t, C_t`.
///
/// Returns `y: [M, E]` and, when `keep_states`, every hidden state `[M, E, N]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn selective_scan_raw<T: Scalar>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    keep_states: bool,
) -> (Vec<T>, Vec<T>) {
    let ScanDims { len: m, channels: e, state: n } = dims;
    let mut h = vec![T::ZERO; e * n];
    let mut y = vec![T::ZERO; m * e];
    let mut states = if keep_states { Vec::with_capacity(m * e * n) } else { Vec::new() };
    for t in 0..m {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for ch in 0..e {
            let dt = delta[t * e + ch];
            let ut = u[t * e + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let ar = &a[ch * n..(ch + 1) * n];
            let mut acc = d[ch] * ut;
            for i in 0..n {
                let (abar, phi, _, _) = zoh_pair(dt, ar[i]);
                hs[i] = abar * hs[i] + phi * bt[i] * ut;
                acc += ct[i] * hs[i];
            }
            y[t * e + ch] = acc;
        }
        if keep_states {
            states.extend_from_slice(&h);
        }
    }
    (y, states)
}

pub(crate) struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn selective_scan_backward<T: Scalar>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims { len: m, channels: e, state: n } = dims;
    let mut g = ScanGrads {
        u: vec![T::ZERO; m * e],
        delta: vec![T::ZERO; m * e],
        a: vec![T::ZERO; e * n],
        b: vec![T::ZERO; m * n],
        c: vec![T::ZERO; m * n],
        d: vec![T::ZERO; e],
    };
    // gradient w.r.t. h_t, already propagated through Ā_{t+1}
    let mut gh = vec![T::ZERO; e * n];
    for t in (0..m).rev() {
        for ch in 0..e {
            let idx = t * e + ch;
            let gyt = gy[idx];
            let ut = u[idx];
            let dt = delta[idx];
            g.u[idx] += gyt * d[ch];
            g.d[ch] += gyt * ut;
            for i in 0..n {
                let ai = a[ch * n + i];
                let (abar, phi, x, em) = zoh_pair(dt, ai);
                let bti = b[t * n + i];
                let h_t = states[(t * e + ch) * n + i];
                let h_prev = if t > 0 { states[((t - 1) * e + ch) * n + i] } else { T::ZERO };

                g.c[t * n + i] += gyt * h_t;
                let ghs = gh[ch * n + i] + gyt * c[t * n + i];
                let g_abar = ghs * h_prev;
                let g_bbar = ghs * ut;
                g.u[idx] += ghs * phi * bti;
                g.b[t * n + i] += g_bbar * phi;
                let g_phi = g_bbar * bti;
                let dphi_ddelta = if x.abs().to_f64() < ZOH_LIMIT { T::ONE } else { abar };
                g.delta[idx] += g_abar * ai * abar + g_phi * dphi_ddelta;
                g.a[ch * n + i] += g_abar * dt * abar + g_phi * zoh_phi_da(dt, ai, x, abar, em);
                gh[ch * n + i] = ghs * abar;
            }
        }
    }
    g
}

/// Learned maps from a `D`-vector sequence to per-position `B`, `C`, `Δ`.
#[derive(Clone, Debug)]
pub struct SelectiveProjections<T> {
    /// `[D, N]` and bias `[N]`.
    pub w_b: Tensor<T>,
    pub b_b: Tensor<T>,
    /// `[D, N]` and bias `[N]`.
    pub w_c: Tensor<T>,
    pub b_c: Tensor<T>,
    /// `[D, D]` and bias `[D]`; `Δ = softplus(x·W + b)`.
    pub w_delta: Tensor<T>,
    pub b_delta: Tensor<T>,
    /// `[D, N]`; evolution `A = −exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[D]` skip weights.
    pub d: Tensor<T>,
}

/// Graph handles for a [`SelectiveProjections`] bound into a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    pub w_b: crate::autograd::Var,
    pub b_b: crate::autograd::Var,
    pub w_c: crate::autograd::Var,
    pub b_c: crate::autograd::Var,
    pub w_delta: crate::autograd::Var,
    pub b_delta: crate::autograd::Var,
    pub a_log: crate::autograd::Var,
    pub d: crate::autograd::Var,
}

/// Selective scan of `x: [M, D]` inside a graph.
pub fn selective_scan_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: crate::autograd::Var,
    p: &SelectiveVars,
) -> Result<crate::autograd::Var> {
    let b = g.linear(x, p.w_b, Some(p.b_b))?;
    let c = g.linear(x, p.w_c, Some(p.b_c))?;
    let dt = g.linear(x, p.w_delta, Some(p.b_delta))?;
    let dt = g.softplus(dt);
    let a = g.exp(p.a_log);
    let a = g.scale(a, -1.0);
    g.selective_scan(x, dt, a, b, c, p.d)
}

/// Selective scan of a `[M, D]` sequence; output has the input's shape.
pub fn selective_scan<T: Scalar>(x: &Tensor<T>, proj: &SelectiveProjections<T>) -> Result<Tensor<T>> {
    let (m, dm) = x.dims2()?;
    if m == 0 {
        return Err(Error::Contract("scan over an empty sequence".into()));
    }
    let n = proj.a_log.shape().get(1).copied().unwrap_or(0);
    let shapes_ok = proj.w_b.shape() == [dm, n]
        && proj.b_b.len() == n
        && proj.w_c.shape() == [dm, n]
        && proj.b_c.len() == n
        && proj.w_delta.shape() == [dm, dm]
        && proj.b_delta.len() == dm
        && proj.a_log.shape() == [dm, n]
        && proj.d.len() == dm;
    if !shapes_ok {
        return Err(Error::Contract(format!(
            "projections do not fit a sequence of {dm}-vectors"
        )));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let vars = SelectiveVars {
        w_b: g.constant(proj.w_b.clone()),
        b_b: g.constant(proj.b_b.clone()),
        w_c: g.constant(proj.w_c.clone()),
        b_c: g.constant(proj.b_c.clone()),
        w_delta: g.constant(proj.w_delta.clone()),
        b_delta: g.constant(proj.b_delta.clone()),
        a_log: g.constant(proj.a_log.clone()),
        d: g.constant(proj.d.clone()),
    };
    let y = selective_scan_graph(&mut g, xv, &vars)?;
    Ok(g.value(y).clone())
}
