use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule of the forward noising process.
///
/// Timesteps are 1-based: `t ∈ {1, …, T}` and `beta(t)` is the variance added
/// when moving from `z_{t-1}` to `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// The three numbers a linear schedule is built from; this is what checkpoints store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.0120,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_noise_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linearly interpolated `β` from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_noise_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::validation("schedule.steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(
            "schedule.beta",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
        ));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::validation("schedule.steps", "must be at least 1"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::validation(
                "schedule.beta",
                format!("every beta must lie in (0, 1), found {b}"),
            ));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Number of timesteps `T`.
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

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::validation(
                "timestep",
                format!("{t} outside 1..={}", self.steps()),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`; `t = 0` is the clean end of the chain with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Per-item `(√ᾱ_t, √(1−ᾱ_t))` as `(B, 1, 1, 1)` tensors matching `like`'s dtype.
    pub(crate) fn coefficients(&self, ts: &[usize], like: &Tensor, device: &Device) -> Result<(Tensor, Tensor)> {
        for &t in ts {
            self.check_timestep(t)?;
        }
        let b = ts.len();
        let signal: Vec<f64> = ts.iter().map(|&t| self.alpha_bar(t).sqrt()).collect();
        let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect();
        let dtype = like.dtype();
        Ok((
            Tensor::from_vec(signal, (b, 1, 1, 1), device)?.to_dtype(dtype)?,
            Tensor::from_vec(noise, (b, 1, 1, 1), device)?.to_dtype(dtype)?,
        ))
    }
}
