use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pca::EmbeddingSet;
use crate::control::ControlledModel;
use crate::denoiser::UNet;
use crate::diffusion::{forward_diffuse, gaussian, sample, Conditioning, Denoiser, NoiseSchedule, SampleRequest};
use crate::error::{Error, Result};

/// A denoiser whose middle block can be read out as a pooled `(B, C)` tensor.
pub trait MidBlock: Denoiser {
    fn mid_block(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

impl MidBlock for UNet {
    fn mid_block(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.mid_features(z_t, ts, &cond.text)
    }
}

impl MidBlock for ControlledModel {
    fn mid_block(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let mask = cond
            .hint
            .as_ref()
            .ok_or_else(|| Error::validation("conditioning", "controlled model needs a footprint mask"))?;
        self.mid_features(z_t, ts, &cond.text, mask)
    }
}

/// One generation request; the conditioning must have batch size one.
#[derive(Debug, Clone)]
pub struct EmbeddingQuery {
    pub id: String,
    pub label: String,
    pub cond: Conditioning,
}

#[derive(Debug, Clone)]
pub struct EmbedOptions {
    /// Latent `(C, h, w)`.
    pub latent: [usize; 3],
    pub steps: usize,
    pub seed: u64,
    pub dtype: DType,
}

/// The timestep at which activations are read.
pub fn probe_timestep(schedule: &NoiseSchedule) -> usize {
    (schedule.steps() / 2).max(1)
}

/// Generates one latent per query, re-noises it to `T/2` with a fixed draw and
/// records the pooled middle-block activation.
pub fn collect_embeddings<M: MidBlock>(
    model: &M,
    queries: &[EmbeddingQuery],
    schedule: &NoiseSchedule,
    opts: &EmbedOptions,
    device: &Device,
) -> Result<EmbeddingSet> {
    let t = probe_timestep(schedule);
    let [c, h, w] = opts.latent;
    let mut vectors = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        if q.cond.text.batch() != 1 {
            return Err(Error::validation("query", format!("{} has batch size != 1", q.id)));
        }
        let seed = opts.seed.wrapping_add(i as u64);
        let req = SampleRequest {
            shape: [1, c, h, w],
            steps: opts.steps,
            seed,
            dtype: opts.dtype,
        };
        let z0 = sample(model, &q.cond, schedule, &req, device)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let eps = gaussian(&mut rng, &[1, c, h, w], opts.dtype, device)?;
        let z_t = forward_diffuse(&z0, t, &eps, schedule)?.z;
        let feat = model.mid_block(&z_t, &[t], &q.cond)?;
        vectors.push(feat.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    EmbeddingSet::new(
        queries.iter().map(|q| q.id.clone()).collect(),
        queries.iter().map(|q| q.label.clone()).collect(),
        vectors,
    )
}
