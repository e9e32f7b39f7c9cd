use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;

use super::stages::codec_from_checkpoint;
use crate::analytics::MidBlock;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::control::{ControlledModel, FootprintMask};
use crate::denoiser::{embed_text, HashEmbedder, LatentCodec, TextContext, UNet};
use crate::diffusion::{sample, Conditioning, Denoiser, NoiseSchedule, SampleRequest, Stage};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// The denoiser stored in a checkpoint: the bare stage-1 U-Net or the
/// footprint-controlled composition.
pub enum Model {
    Base(Box<UNet>),
    Controlled(Box<ControlledModel>),
}

impl Denoiser for Model {
    fn predict_eps(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        match self {
            Model::Base(m) => m.predict_eps(z_t, ts, cond),
            Model::Controlled(m) => m.predict_eps(z_t, ts, cond),
        }
    }
}

impl MidBlock for Model {
    fn mid_block(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        match self {
            Model::Base(m) => m.mid_block(z_t, ts, cond),
            Model::Controlled(m) => m.mid_block(z_t, ts, cond),
        }
    }
}

/// A loaded checkpoint ready to turn (brief, footprint) pairs into plans.
pub struct Generator {
    pub meta: CheckpointMeta,
    pub codec: LatentCodec,
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub embedder: HashEmbedder,
    pub dtype: DType,
    pub device: Device,
}

impl Generator {
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let ck = Checkpoint::load(path, &device).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })?;
        Self::from_checkpoint(&ck, dtype)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let codec = codec_from_checkpoint(ck, dtype, &device)?;
        let model = match ck.meta.stage {
            Stage::One => {
                let t = ck
                    .section("unet")
                    .into_iter()
                    .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
                    .collect::<Result<_>>()?;
                Model::Base(Box::new(UNet::new(
                    &ck.meta.unet,
                    VarBuilder::from_tensors(t, dtype, &device),
                )?))
            }
            Stage::Two => Model::Controlled(Box::new(ControlledModel::from_checkpoint(ck, dtype, &device)?)),
        };
        if !ck.meta.trained {
            log::warn!("checkpoint holds untrained weights");
        }
        Ok(Self {
            meta: ck.meta.clone(),
            codec,
            schedule: ck.meta.schedule.build()?,
            embedder: ck.meta.embedder.build()?,
            model,
            dtype,
            device,
        })
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    pub fn max_steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn is_controlled(&self) -> bool {
        matches!(self.model, Model::Controlled(_))
    }

    /// `(C, h, w)` of the diffusion latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        let (c, h, w) = self.meta.codec.latent_shape(self.image_size(), self.image_size());
        [c, h, w]
    }

    /// Conditioning for one brief and an optional footprint, batch size one.
    pub fn condition(&self, prompt: &str, mask: Option<&FootprintMask>) -> Result<Conditioning> {
        let brief = embed_text(&self.embedder, prompt)?;
        let text = TextContext::from_briefs(&[brief], self.dtype, &self.device)?;
        match (mask, self.is_controlled()) {
            (Some(m), true) => {
                let size = self.image_size();
                if m.height() != size || m.width() != size {
                    return Err(Error::validation(
                        "mask",
                        format!("expected {size}x{size}, got {}x{}", m.height(), m.width()),
                    ));
                }
                if m.is_empty() {
                    return Err(Error::validation("mask", "footprint is empty"));
                }
                Ok(Conditioning::with_hint(text, m.to_tensor(self.dtype, &self.device)?))
            }
            (None, true) => Err(Error::validation("mask", "a stage-2 checkpoint needs a footprint mask")),
            (Some(_), false) => {
                log::warn!("stage-1 checkpoint ignores the footprint mask");
                Ok(Conditioning::text(text))
            }
            (None, false) => Ok(Conditioning::text(text)),
        }
    }

    /// Denoised latent for one seed.
    pub fn sample_latent(&self, cond: &Conditioning, steps: usize, seed: u64) -> Result<Tensor> {
        let [c, h, w] = self.latent_shape();
        let req = SampleRequest {
            shape: [1, c, h, w],
            steps,
            seed,
            dtype: self.dtype,
        };
        sample(&self.model, cond, &self.schedule, &req, &self.device)
    }

    pub fn decode(&self, z: &Tensor) -> Result<ImageGrid> {
        let x = self.codec.decode(&z.affine(1.0 / self.meta.latent_scale, 0.0)?)?;
        ImageGrid::from_model_tensor(&x)
    }

    /// `n` plans; image `i` uses seed `seed + i`, so each tile is reproducible on its own.
    pub fn generate(
        &self,
        prompt: &str,
        mask: Option<&FootprintMask>,
        steps: usize,
        n: usize,
        seed: u64,
    ) -> Result<Vec<ImageGrid>> {
        if n == 0 {
            return Err(Error::validation("n", "must be at least 1"));
        }
        let cond = self.condition(prompt, mask)?;
        (0..n)
            .map(|i| {
                let z = self.sample_latent(&cond, steps, seed.wrapping_add(i as u64))?;
                Ok(self.decode(&z)?.quantized())
            })
            .collect()
    }
}
