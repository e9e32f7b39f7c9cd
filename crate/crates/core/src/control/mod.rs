//! Footprint conditioning on top of a frozen text-conditioned denoiser.
//!
//! A [`ControlledModel`] holds the stage-1 U-Net as plain (non-variable)
//! tensors, a trainable copy of its encoder, a small hint encoder that brings
//! the footprint mask to latent resolution, and 1×1 convolutions initialized
//! at zero on both sides of the copy. The output is
//!
//! ```text
//! x̃ = F(x; Θ) + Z(F(x + Z(y₂; Θ_z1); Θ_c); Θ_z2)
//! ```
//!
//! where the outer term is delivered as one residual per decoder skip plus one
//! for the middle block.

mod mask;

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Init, VarBuilder, VarMap};

pub use mask::{affine_condition_transform, FootprintMask};

use crate::checkpoint::{weights_checksum, Checkpoint};
use crate::denoiser::{conv3x3, ControlResiduals, TextContext, UNet, UNetConfig, UNetEncoder};
use crate::diffusion::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::params::seeded_builder;

fn zero_conv(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((c_out, c_in, 1, 1), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(c_out, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(w, Some(b), Default::default()))
}

/// Strided convolutions from the full-resolution mask to the latent grid.
#[derive(Debug, Clone)]
pub struct HintEncoder {
    convs: Vec<Conv2d>,
    factor: usize,
}

impl HintEncoder {
    pub fn new(z_channels: usize, factor: usize, vb: VarBuilder) -> Result<Self> {
        if !factor.is_power_of_two() {
            return Err(Error::validation("hint factor", "must be a power of two"));
        }
        let halvings = factor.trailing_zeros() as usize;
        let layers = halvings.max(2) + 1;
        let widths: Vec<usize> = (0..layers)
            .map(|i| if i + 1 == layers { z_channels } else { 16 << i.min(1) })
            .collect();
        let mut convs = Vec::with_capacity(layers);
        let mut prev = 1;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i >= layers - halvings { 2 } else { 1 };
            convs.push(conv3x3(prev, w, stride, vb.pp(format!("{i}")))?);
            prev = w;
        }
        Ok(Self { convs, factor })
    }

    pub fn forward(&self, mask: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = mask.dims4()?;
        if c != 1 || h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::validation(
                "mask",
                format!(
                    "shape {:?} needs one channel and dims divisible by {}",
                    mask.dims(),
                    self.factor
                ),
            ));
        }
        let mut h = mask.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

/// The trainable half of the controlled model.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    hint: HintEncoder,
    zero_in: Conv2d,
    encoder: UNetEncoder,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
}

impl ControlBranch {
    fn new(config: &UNetConfig, factor: usize, vb: VarBuilder) -> Result<Self> {
        let z = config.latent_channels;
        let chans = config.level_channels();
        let zero_skips = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| zero_conv(c, c, vb.pp(format!("zero_out.{i}"))))
            .collect::<Result<_>>()?;
        let top = *chans.last().expect("validated non-empty");
        Ok(Self {
            hint: HintEncoder::new(z, factor, vb.pp("hint"))?,
            zero_in: zero_conv(z, z, vb.pp("zero_in"))?,
            encoder: UNetEncoder::new(config, vb.pp("encoder"))?,
            zero_skips,
            zero_mid: zero_conv(top, top, vb.pp("zero_mid"))?,
        })
    }

    fn residuals(&self, z_t: &Tensor, ts: &[usize], text: &TextContext, mask: &Tensor) -> Result<ControlResiduals> {
        let hint = self.hint.forward(mask)?;
        if hint.dims()[2..] != z_t.dims()[2..] || hint.dim(0)? != z_t.dim(0)? {
            return Err(Error::validation(
                "mask",
                format!("encodes to {:?}, latent is {:?}", hint.dims(), z_t.dims()),
            ));
        }
        let x = (z_t + self.zero_in.forward(&hint)?)?;
        let enc = self.encoder.forward(&x, ts, text)?;
        let skips = enc
            .skips
            .iter()
            .zip(&self.zero_skips)
            .map(|(s, zc)| Ok(zc.forward(s)?))
            .collect::<Result<_>>()?;
        Ok(ControlResiduals {
            skips,
            mid: self.zero_mid.forward(&enc.mid)?,
        })
    }
}

/// Frozen stage-1 denoiser plus the footprint control branch.
pub struct ControlledModel {
    frozen: UNet,
    frozen_tensors: BTreeMap<String, Tensor>,
    base_checksum: String,
    branch: ControlBranch,
    vars: VarMap,
    factor: usize,
}

impl ControlledModel {
    /// Freezes `base` (U-Net weights keyed without the `unet.` prefix) and
    /// clones its encoder into fresh trainable variables. Zero convolutions
    /// start at exactly zero.
    pub fn clone_and_freeze(
        base: &HashMap<String, Tensor>,
        config: &UNetConfig,
        factor: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let frozen_tensors: BTreeMap<String, Tensor> = base
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?.detach())))
            .collect::<Result<_>>()?;
        let frozen_vb = VarBuilder::from_tensors(frozen_tensors.clone().into_iter().collect(), dtype, device);
        let frozen = UNet::new(config, frozen_vb)?;
        let base_checksum = weights_checksum(&frozen_tensors)?;

        let mut vars = VarMap::new();
        let branch = ControlBranch::new(config, factor, seeded_builder(&vars, seed, dtype, device))?;
        let names: Vec<String> = vars
            .data()
            .lock()
            .expect("varmap lock poisoned")
            .keys()
            .filter(|k| k.starts_with("encoder."))
            .cloned()
            .collect();
        for name in names {
            let src = frozen_tensors
                .get(&name)
                .ok_or_else(|| Error::validation("base weights", format!("missing tensor {name}")))?;
            vars.set_one(&name, src)?;
        }
        Ok(Self {
            frozen,
            frozen_tensors,
            base_checksum,
            branch,
            vars,
            factor,
        })
    }

    /// Restores a stage-2 checkpoint, verifying that its frozen weights match
    /// the stage-1 digest recorded when it was cloned.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: Default::default(),
            reason,
        };
        let base = ck.section("unet");
        if base.is_empty() {
            return Err(bad("no unet weights".into()));
        }
        let mut model = Self::clone_and_freeze(
            &base,
            &ck.meta.unet,
            ck.meta.codec.downsample_factor,
            ck.meta.seed,
            dtype,
            device,
        )?;
        if let Some(expected) = &ck.meta.base_checksum {
            let stored: BTreeMap<String, Tensor> = base.into_iter().collect();
            if &weights_checksum(&stored)? != expected {
                return Err(bad("frozen weights do not match the recorded stage-1 checksum".into()));
            }
        }
        let control = ck.section("control");
        if !control.is_empty() {
            let names: Vec<String> = model
                .vars
                .data()
                .lock()
                .expect("varmap lock poisoned")
                .keys()
                .cloned()
                .collect();
            for name in names {
                let t = control
                    .get(&name)
                    .ok_or_else(|| bad(format!("missing tensor control.{name}")))?;
                model.vars.set_one(&name, t.to_dtype(dtype)?)?;
            }
        }
        Ok(model)
    }

    pub fn frozen(&self) -> &UNet {
        &self.frozen
    }

    /// Trainable parameters: hint encoder, encoder copy and zero convolutions.
    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn downsample_factor(&self) -> usize {
        self.factor
    }

    /// Digest of the frozen weights, recomputed from the live tensors.
    pub fn frozen_checksum(&self) -> Result<String> {
        weights_checksum(&self.frozen_tensors)
    }

    /// Digest of the stage-1 weights as received at cloning time.
    pub fn base_checksum(&self) -> &str {
        &self.base_checksum
    }

    /// Largest absolute difference between the encoder copy and the frozen encoder.
    pub fn clone_drift(&self) -> Result<f64> {
        let data = self.vars.data().lock().expect("varmap lock poisoned");
        let mut worst = 0f64;
        for (name, var) in data.iter().filter(|(k, _)| k.starts_with("encoder.")) {
            let d = (var.as_tensor() - &self.frozen_tensors[name])?
                .abs()?
                .max_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Largest absolute value among the zero-convolution parameters.
    pub fn zero_conv_magnitude(&self) -> Result<f64> {
        let data = self.vars.data().lock().expect("varmap lock poisoned");
        let mut worst = 0f64;
        for (_, var) in data.iter().filter(|(k, _)| k.starts_with("zero_")) {
            let d = var
                .as_tensor()
                .abs()?
                .max_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Weights for a checkpoint: frozen under `unet.`, trainable under `control.`.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out: BTreeMap<String, Tensor> = self
            .frozen_tensors
            .iter()
            .map(|(k, v)| (format!("unet.{k}"), v.clone()))
            .collect();
        out.extend(crate::checkpoint::snapshot(&self.vars, "control")?);
        Ok(out)
    }

    pub fn controlled_forward(&self, z_t: &Tensor, ts: &[usize], text: &TextContext, mask: &Tensor) -> Result<Tensor> {
        let residuals = self.branch.residuals(z_t, ts, text, mask)?;
        let enc = self.frozen.encoder.forward(z_t, ts, text)?;
        self.frozen.decoder.forward(&enc, text, Some(&residuals))
    }

    /// Pooled middle-block activation of the frozen path with control residuals applied.
    pub fn mid_features(&self, z_t: &Tensor, ts: &[usize], text: &TextContext, mask: &Tensor) -> Result<Tensor> {
        let residuals = self.branch.residuals(z_t, ts, text, mask)?;
        let enc = self.frozen.encoder.forward(z_t, ts, text)?;
        Ok((enc.mid + residuals.mid)?.mean(3)?.mean(2)?)
    }
}

impl Denoiser for ControlledModel {
    fn predict_eps(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let mask = cond
            .hint
            .as_ref()
            .ok_or_else(|| Error::validation("conditioning", "controlled model needs a footprint mask"))?;
        self.controlled_forward(z_t, ts, &cond.text, mask)
    }
}
