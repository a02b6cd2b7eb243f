//! DDPM forward-process coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters that fully determine a [`NoiseSchedule`]; recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

/// Per-step variances `beta[t]`, `alpha[t] = 1 - beta[t]` and the cumulative
/// `alpha_bar[t]`, with `alpha_bar[0] = 1` so that `t = 0` is clean data.
///
/// Vectors are indexed by timestep; index 0 of `beta`/`alpha` is a placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f32>,
    alpha: Vec<f32>,
    alpha_bar: Vec<f32>,
    alpha_bar_f64: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolated betas between the two endpoints, inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut beta = vec![0.0f32];
        let mut alpha = vec![1.0f32];
        let mut alpha_bar = vec![1.0f32];
        let mut alpha_bar_f64 = vec![1.0f64];
        let mut cumulative = 1.0f64;
        for t in 1..=steps {
            let b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            };
            cumulative *= 1.0 - b;
            beta.push(b as f32);
            alpha.push((1.0 - b) as f32);
            alpha_bar.push(cumulative as f32);
            alpha_bar_f64.push(cumulative);
        }
        Ok(NoiseSchedule {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha,
            alpha_bar,
            alpha_bar_f64,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bar[t]
    }

    /// The 64-bit cumulative product the stored `alpha_bar` was rounded from.
    pub fn alpha_bar_f64(&self, t: usize) -> f64 {
        self.alpha_bar_f64[t]
    }

    pub fn betas(&self) -> &[f32] {
        &self.beta[1..]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))`, for `0 <= t <= T`.
    pub fn marginal_coeffs(&self, t: usize) -> (f32, f32) {
        let ab = self.alpha_bar[t] as f64;
        (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
    }

    /// Closed-form forward marginal `sqrt(ab) x0 + sqrt(1 - ab) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, b) = self.marginal_coeffs(t);
        Ok(x0.zip_map(eps, "q_sample", |x, e| a * x + b * e)?)
    }

    /// Coefficients of the mean parameterization `mu = c_xt * (x_t - c_eps * eps_hat)`:
    /// `c_xt = 1 / sqrt(alpha[t])`, `c_eps = beta[t] / sqrt(1 - alpha_bar[t])`.
    pub fn posterior_mean_coeffs(&self, t: usize) -> Result<(f32, f32)> {
        self.check_t(t)?;
        let alpha = self.alpha[t] as f64;
        let beta = self.beta[t] as f64;
        let ab = self.alpha_bar[t] as f64;
        Ok(((1.0 / alpha.sqrt()) as f32, (beta / (1.0 - ab).sqrt()) as f32))
    }

    /// Standard deviation of the reverse step, `sqrt(beta[t])`.
    pub fn reverse_std(&self, t: usize) -> f32 {
        (self.beta[t] as f64).sqrt() as f32
    }
}
