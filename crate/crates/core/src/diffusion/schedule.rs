use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β linear in its square root, hence quadratic in t.
    SqrtLinear,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub schedule: ScheduleKind,
    /// Posterior samples averaged at evaluation time.
    pub samples: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            schedule: ScheduleKind::SqrtLinear,
            samples: 8,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("posterior sample count must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step coefficients, stored 0-based but addressed with the 1-based
/// step `t ∈ 1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `σ_t = √β_t`.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

pub fn build_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let n = cfg.steps;
    let frac = |i: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    let beta: Vec<f64> = (0..n)
        .map(|i| match cfg.schedule {
            ScheduleKind::SqrtLinear => {
                let (lo, hi) = (cfg.beta_min.sqrt(), cfg.beta_max.sqrt());
                (lo + frac(i) * (hi - lo)).powi(2)
            }
            ScheduleKind::Linear => cfg.beta_min + frac(i) * (cfg.beta_max - cfg.beta_min),
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(dim_err("forward_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    x0.zip_map(eps, "forward_sample", |x, e| a * x + b * e)
}

/// One ancestral step `x_t → x_{t−1}` from a noise estimate. `z` is ignored
/// at `t = 1`, where the chain ends on the mean.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(dim_err("reverse_step", x_t.shape(), eps_hat.shape()));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mut out = x_t.zip_map(eps_hat, "reverse_step", |x, e| inv_sqrt_alpha * (x - coef * e))?;
    if t > 1 {
        if let Some(z) = z {
            if z.shape() != x_t.shape() {
                return Err(dim_err("reverse_step", x_t.shape(), z.shape()));
            }
            let s = sched.sigma(t);
            out.data_mut().iter_mut().zip(z.data()).for_each(|(o, z)| *o += s * z);
        }
    }
    Ok(out)
}

/// One-shot estimate `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    x_t.zip_map(eps_hat, "predict_x0", |x, e| (x - b * e) / a)
}
