//! Deterministic strided reverse process (η = 0).

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gaussian, Conditioning, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};

/// Shape, dtype and seed of a sampling run.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    /// Latent shape `(B, C, h, w)`.
    pub shape: [usize; 4],
    pub steps: usize,
    pub seed: u64,
    pub dtype: DType,
}

/// The `steps` timesteps visited by the sampler, ascending, always ending at `T`.
///
/// `t_k = ⌈k·T / steps⌉` for `k = 1..=steps`; distinct because `steps ≤ T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > total {
        return Err(Error::validation("steps", format!("{steps} outside 1..={total}")));
    }
    Ok((1..=steps).map(|k| (k * total).div_ceil(steps)).collect())
}

/// Draws `z_T ~ N(0, I)` from `seed` and runs [`denoise_from`].
pub fn sample<M: Denoiser>(
    model: &M,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    request: &SampleRequest,
    device: &Device,
) -> Result<Tensor> {
    ddim_timesteps(schedule.steps(), request.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let z_t = gaussian(&mut rng, &request.shape, request.dtype, device)?;
    denoise_from(model, z_t, cond, schedule, request.steps)
}

/// Runs the reverse recursion from a given `z_T` and returns the `z_0` estimate.
pub fn denoise_from<M: Denoiser>(
    model: &M,
    mut z: Tensor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor> {
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    let batch = z.dim(0)?;
    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let t_prev = if k == 0 { 0 } else { ts[k - 1] };
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let eps = model.predict_eps(&z, &vec![t; batch], cond)?;
        let z0_hat = ((&z - eps.affine((1.0 - ab).sqrt(), 0.0)?)? / ab.sqrt())?;
        z = if t_prev == 0 {
            z0_hat
        } else {
            (z0_hat.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)?
        };
    }
    Ok(z)
}
