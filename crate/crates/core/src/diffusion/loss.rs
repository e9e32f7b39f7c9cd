use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{forward_diffuse_batch, gaussian, Conditioning, Denoiser, NoiseSchedule};
use crate::denoiser::TextContext;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    /// Text-conditioned base model.
    One,
    /// Footprint-controlled model on top of the frozen base.
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("unknown stage {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub stage: Stage,
    pub batch_size: usize,
}

/// A differentiable scalar loss plus its host-side summary.
#[derive(Debug, Clone)]
pub struct Loss {
    pub tensor: Tensor,
    pub report: LossReport,
}

/// Squared error averaged over every element of the batch.
pub fn denoising_mse(eps: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    if eps.shape() != predicted.shape() {
        return Err(Error::validation(
            "prediction",
            format!("shape {:?} does not match target {:?}", predicted.dims(), eps.dims()),
        ));
    }
    Ok((eps - predicted)?.sqr()?.mean_all()?)
}

/// ε-prediction objective conditioned on the brief alone.
///
/// Draws `t ~ U{1..T}` for each batch item and then `ε ~ N(0, I)`, both from `rng`.
pub fn stage1_loss<M: Denoiser>(
    model: &M,
    z0: &Tensor,
    text: &TextContext,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Loss> {
    let cond = Conditioning::text(text.clone());
    denoising_loss(model, z0, &cond, schedule, rng, Stage::One)
}

/// Same objective with the footprint mask as a second condition.
pub fn stage2_loss<M: Denoiser>(
    model: &M,
    z0: &Tensor,
    text: &TextContext,
    hint: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Loss> {
    let cond = Conditioning::with_hint(text.clone(), hint.clone());
    denoising_loss(model, z0, &cond, schedule, rng, Stage::Two)
}

fn denoising_loss<M: Denoiser>(
    model: &M,
    z0: &Tensor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    stage: Stage,
) -> Result<Loss> {
    if z0.rank() != 4 {
        return Err(Error::validation(
            "z0",
            format!("expected (B, C, H, W), got {:?}", z0.dims()),
        ));
    }
    let batch = z0.dim(0)?;
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(rng, z0.dims(), z0.dtype(), z0.device())?;
    let z_t = forward_diffuse_batch(z0, &ts, &eps, schedule)?;
    let predicted = model.predict_eps(&z_t, &ts, cond)?;
    let tensor = denoising_mse(&eps, &predicted)?;
    let value = tensor.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok(Loss {
        tensor,
        report: LossReport {
            value,
            stage,
            batch_size: batch,
        },
    })
}
