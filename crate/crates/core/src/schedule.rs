//! Closed-form diffusion quantities: the linear noise schedule, noise-level
//! sampling for training, the forward marginal and the reverse-step variance.
//!
//! Steps are 1-based: `alpha(t)`/`gamma(t)` for `t ∈ 1..=T`, with the
//! convention `gamma(0) = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reference step count the default β range is calibrated for.
pub const REFERENCE_STEPS: usize = 4000;
pub const REFERENCE_BETA_MIN: f64 = 1e-6;
pub const REFERENCE_BETA_MAX: f64 = 1e-2;

/// Default `(β_min, β_max)` for `steps`, stretched so that the terminal
/// signal level stays comparable to the 4000-step reference.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let s = REFERENCE_STEPS as f64 / steps.max(1) as f64;
    (REFERENCE_BETA_MIN * s, REFERENCE_BETA_MAX * s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    /// `alpha[t-1]` is α_t.
    alpha: Vec<f64>,
    /// `gamma[t-1]` is γ_t = α_1·…·α_t.
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` to `beta_max` over `steps`; `α = 1 − β`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&beta_min) || !(beta_min..1.0).contains(&beta_max) {
            return Err(Error::Config(format!(
                "need 0 ≤ beta_min ≤ beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let alpha: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                1.0 - (beta_min + (beta_max - beta_min) * frac)
            })
            .collect();
        let mut gamma = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            gamma.push(acc);
        }
        Ok(Self {
            beta_min,
            beta_max,
            alpha,
            gamma,
        })
    }

    /// [`NoiseSchedule::linear`] with [`default_beta_range`].
    pub fn with_default_betas(steps: usize) -> Result<Self> {
        let (lo, hi) = default_beta_range(steps);
        Self::linear(steps, lo, hi)
    }

    /// A shorter linear schedule whose β endpoints are scaled by
    /// `T / steps`, so the terminal signal level stays comparable.
    pub fn stretched(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::Config(format!("{steps} sampling steps for a {}-step schedule", self.steps())));
        }
        if steps == self.steps() {
            return Ok(self.clone());
        }
        let s = self.steps() as f64 / steps as f64;
        Self::linear(steps, self.beta_min * s, self.beta_max * s)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha[t - 1])
    }

    /// γ_t, with γ_0 = 1.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.gamma[t - 1])
    }

    /// Draws `t` uniformly from `1..=T`, then γ uniformly from `[γ_t, γ_{t−1}]`.
    pub fn sample_gamma<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let t = rng.gen_range(1..=self.steps());
        let lo = self.gamma[t - 1];
        let hi = if t == 1 { 1.0 } else { self.gamma[t - 2] };
        let u: f64 = rng.gen();
        // lo ≤ hi always; the interval is degenerate when α_t = 1
        let g = lo + (hi - lo) * u;
        (t, g.clamp(lo, hi))
    }

    /// σ_t = sqrt((1 − γ_{t−1})(1 − α_t) / (1 − γ_t)).
    pub fn posterior_sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        if t == 1 {
            return Ok(0.0);
        }
        let g = self.gamma[t - 1];
        if g >= 1.0 {
            return Err(Error::DegenerateSchedule(format!(
                "γ_{t} = 1 leaves the reverse variance undefined"
            )));
        }
        let var = (1.0 - self.gamma[t - 2]) * (1.0 - self.alpha[t - 1]) / (1.0 - g);
        Ok(var.max(0.0).sqrt())
    }
}

/// `sqrt(γ)·f0 + sqrt(1 − γ)·ε`.
pub fn forward_marginal<T: Scalar>(f0: &Tensor<T>, gamma: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if f0.shape() != eps.shape() {
        return Err(Error::Contract(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            f0.shape()
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Contract(format!("γ = {gamma} outside (0, 1]")));
    }
    let a = T::from_f64(gamma.sqrt());
    let b = T::from_f64((1.0 - gamma).sqrt());
    Ok(f0.zip_map(eps, |x, e| a * x + b * e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn three_step() -> NoiseSchedule {
        NoiseSchedule::linear(3, 0.1, 0.3).unwrap()
    }

    #[test]
    fn hand_multiplied_three_step() {
        let s = three_step();
        let expect_a = [0.9, 0.8, 0.7];
        let expect_g = [0.9, 0.72, 0.504];
        for i in 0..3 {
            assert!((s.alphas()[i] - expect_a[i]).abs() < 1e-12);
            assert!((s.gammas()[i] - expect_g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_is_running_product_and_monotone() {
        // below 41 steps the stretched β_max reaches 1
        assert!(NoiseSchedule::with_default_betas(40).is_err());
        for steps in [50, 200, 4000] {
            let s = NoiseSchedule::with_default_betas(steps).unwrap();
            assert_eq!(s.steps(), steps);
            let mut prod = 1.0;
            for t in 1..=steps {
                prod *= s.alpha(t).unwrap();
                assert_eq!(s.gamma(t).unwrap(), prod);
                assert!(s.alpha(t).unwrap() > 0.0 && s.alpha(t).unwrap() <= 1.0);
                assert!(s.gamma(t).unwrap() <= s.gamma(t - 1).unwrap());
            }
        }
    }

    #[test]
    fn zero_noise_degenerate() {
        let s = NoiseSchedule::linear(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alphas(), &[1.0]);
        assert_eq!(s.gammas(), &[1.0]);
        assert_eq!(s.posterior_sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(4, -0.1, 0.2).is_err());
    }

    #[test]
    fn posterior_sigma_values() {
        let s = three_step();
        assert_eq!(s.posterior_sigma(1).unwrap(), 0.0);
        let s2 = s.posterior_sigma(2).unwrap();
        assert!((s2 * s2 - 0.1 * 0.2 / 0.28).abs() < 1e-12);
        assert!((s2 - 0.267_261_241_9).abs() < 1e-9);
        assert!(s.posterior_sigma(0).is_err());
        assert!(s.posterior_sigma(4).is_err());

        let flat = NoiseSchedule::linear(3, 0.0, 0.0).unwrap();
        assert!(matches!(flat.posterior_sigma(2), Err(Error::DegenerateSchedule(_))));
        // α_t = 1 after a noisy step gives σ_t = 0
        let mut s3 = three_step();
        s3.alpha[2] = 1.0;
        s3.gamma[2] = s3.gamma[1];
        assert_eq!(s3.posterior_sigma(3).unwrap(), 0.0);
    }

    #[test]
    fn sample_gamma_single_step_and_determinism() {
        let one = NoiseSchedule::linear(1, 0.05, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (t, g) = one.sample_gamma(&mut rng);
            assert_eq!(t, 1);
            assert!((0.95..=1.0).contains(&g));
        }
        let s = three_step();
        let a = s.sample_gamma(&mut ChaCha8Rng::seed_from_u64(9));
        let b = s.sample_gamma(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_gamma_uniform_over_steps() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let (t, g) = s.sample_gamma(&mut rng);
            counts[t - 1] += 1;
            assert!(g >= s.gamma(t).unwrap() && g <= s.gamma(t - 1).unwrap());
        }
        let p = 0.1;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn forward_marginal_endpoints() {
        let f0 = Tensor::from_vec(&[1, 1, 3], vec![0.3f64, -0.7, 1.0]).unwrap();
        let eps = Tensor::from_vec(&[1, 1, 3], vec![0.5f64, 2.0, -1.0]).unwrap();
        assert_eq!(forward_marginal(&f0, 1.0, &eps).unwrap(), f0);
        let near = forward_marginal(&f0, 1e-14, &eps).unwrap();
        for (a, b) in near.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let one = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let half = Tensor::from_vec(&[1], vec![0.5f64]).unwrap();
        let v = forward_marginal(&one, 0.25, &half).unwrap()[0];
        assert!((v - 0.933_012_7).abs() < 1e-5);
        assert!(forward_marginal(&f0, 0.5, &one).is_err());
        assert!(forward_marginal(&f0, 0.0, &eps).is_err());
    }

    #[test]
    fn forward_marginal_statistics() {
        let (f0v, gamma) = (0.8f64, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let f0 = Tensor::from_vec(&[n], vec![f0v; n]).unwrap();
        let eps = Tensor::from_vec(&[n], (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let out = forward_marginal(&f0, gamma, &eps).unwrap();
        let mean = out.sum() / n as f64;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - gamma.sqrt() * f0v).abs() < 0.01);
        assert!((var.sqrt() / (1.0 - gamma).sqrt() - 1.0).abs() < 0.01);
    }

    #[test]
    fn stretched_keeps_terminal_level() {
        let full = NoiseSchedule::with_default_betas(4000).unwrap();
        let short = full.stretched(200).unwrap();
        assert_eq!(short.steps(), 200);
        assert_eq!(short.beta_range(), default_beta_range(200));
        let (a, b) = (full.gamma(4000).unwrap(), short.gamma(200).unwrap());
        assert!(a < 1e-8 && b < 1e-8, "{a} {b}");
        assert_eq!(full.stretched(4000).unwrap(), full);
        assert!(full.stretched(0).is_err());
        assert!(full.stretched(4001).is_err());
    }
}
