use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::NdArray;

/// Variance schedule of the forward process. Time steps are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const PAPER_STEPS: usize = 1000;
pub const PAPER_BETA_START: f64 = 1.5e-3;
pub const PAPER_BETA_END: f64 = 0.02;

/// `β_t` interpolated linearly from `beta_1` at `t = 1` to `beta_t` at `t = steps`.
pub fn linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "linear schedule needs 0 < beta_1 < beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let span = (steps - 1) as f64;
    let beta = (0..steps)
        .map(|i| {
            if i == steps - 1 {
                beta_t
            } else {
                beta_1 + (beta_t - beta_1) * i as f64 / span
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_schedule(PAPER_STEPS, PAPER_BETA_START, PAPER_BETA_END).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    /// Any schedule with `0 ≤ β_t < 1`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("empty noise schedule".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta_{} = {b} outside [0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                index: t,
                extent: self.steps(),
            });
        }
        Ok(())
    }

    /// Panics unless `1 ≤ t ≤ steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Reverse-step noise scale, `√β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

fn same_shape<T: Real>(a: &NdArray<T>, b: &NdArray<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Closed-form forward noising `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Real>(x0: &NdArray<T>, t: usize, eps: &NdArray<T>, s: &NoiseSchedule) -> Result<NdArray<T>> {
    s.check(t)?;
    same_shape(x0, eps, "q_sample noise")?;
    let ab = s.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    NdArray::new(x0.shape(), data)
}

/// One reverse step. `z` is ignored at `t = 1`.
pub fn ddpm_step<T: Real>(
    x_t: &NdArray<T>,
    t: usize,
    eps_hat: &NdArray<T>,
    z: &NdArray<T>,
    s: &NoiseSchedule,
) -> Result<NdArray<T>> {
    s.check(t)?;
    same_shape(x_t, eps_hat, "ddpm_step prediction")?;
    same_shape(x_t, z, "ddpm_step noise")?;
    let coef = T::lit(s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt());
    let root = T::lit(s.alpha(t).sqrt());
    let sigma = if t == 1 { T::zero() } else { T::lit(s.sigma(t)) };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| (x - coef * e) / root + sigma * n)
        .collect();
    NdArray::new(x_t.shape(), data)
}

/// Inverts [`q_sample`] given the noise: `(x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0<T: Real>(x_t: &NdArray<T>, t: usize, eps: &NdArray<T>, s: &NoiseSchedule) -> Result<NdArray<T>> {
    s.check(t)?;
    same_shape(x_t, eps, "predict_x0 noise")?;
    let ab = s.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let data = x_t.data().iter().zip(eps.data()).map(|(&x, &e)| (x - b * e) / a).collect();
    NdArray::new(x_t.shape(), data)
}
