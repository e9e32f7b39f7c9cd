//! Noise schedule, forward process, training objectives and the reverse sampler.

mod loss;
mod sampler;
mod schedule;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

pub use loss::{denoising_mse, stage1_loss, stage2_loss, Loss, LossReport, Stage};
pub use sampler::{ddim_timesteps, denoise_from, sample, SampleRequest};
pub use schedule::{make_noise_schedule, NoiseSchedule, ScheduleParams};

use crate::denoiser::TextContext;
use crate::error::{Error, Result};

/// Everything an ε-predictor may condition on besides `(z_t, t)`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub text: TextContext,
    /// Footprint masks `(B, 1, H, W)` in `{0, 1}`; only the controlled model reads it.
    pub hint: Option<Tensor>,
}

impl Conditioning {
    pub fn text(text: TextContext) -> Self {
        Self { text, hint: None }
    }

    pub fn with_hint(text: TextContext, hint: Tensor) -> Self {
        Self { text, hint: Some(hint) }
    }
}

/// A noise predictor `ε_θ(z_t, t, ·)`.
pub trait Denoiser {
    /// `ts` holds one 1-based timestep per batch item.
    fn predict_eps(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        (**self).predict_eps(z_t, ts, cond)
    }
}

/// A noised latent together with its timestep.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

/// Closed-form marginal `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε` for a single timestep.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentState> {
    if z0.shape() != eps.shape() {
        return Err(Error::validation(
            "eps",
            format!("shape {:?} does not match z0 {:?}", eps.dims(), z0.dims()),
        ));
    }
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let z = (z0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(LatentState { z, t })
}

/// Batched marginal with one timestep per leading-axis item of a `(B, C, H, W)` latent.
pub fn forward_diffuse_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::validation(
            "eps",
            format!("shape {:?} does not match z0 {:?}", eps.dims(), z0.dims()),
        ));
    }
    if z0.rank() != 4 || z0.dim(0)? != ts.len() {
        return Err(Error::validation(
            "timesteps",
            format!("need one timestep per item of {:?}", z0.dims()),
        ));
    }
    let (signal, noise) = schedule.coefficients(ts, z0, z0.device())?;
    Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Standard normal draws from `rng`, laid out row-major in `shape`.
pub fn gaussian(rng: &mut impl Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
