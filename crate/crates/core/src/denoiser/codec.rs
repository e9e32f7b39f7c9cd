//! Convolutional autoencoder between images and the diffusion latent space.
//!
//! The encoder outputs the mean and log-variance of a diagonal Gaussian
//! posterior `q(z|x) = N(μ(x), σ²(x)·I)`; the decoder maps a latent back to an
//! image in model space.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, VarBuilder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::conv3x3;
use crate::diffusion::gaussian;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Spatial reduction; must be a power of two.
    pub downsample_factor: usize,
    pub z_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 64,
            downsample_factor: 4,
            z_channels: 4,
        }
    }
}

impl CodecConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.z_channels == 0 {
            return Err(Error::validation("codec", "channel counts must be nonzero"));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::validation(
                "codec.downsample_factor",
                format!("{} is not a power of two", self.downsample_factor),
            ));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (
            self.z_channels,
            height / self.downsample_factor,
            width / self.downsample_factor,
        )
    }
}

/// Posterior parameters and a latent drawn from them.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub mu: Tensor,
    pub sigma2: Tensor,
    pub z: Tensor,
}

#[derive(Debug, Clone)]
struct ConvPair {
    a: Conv2d,
    b: Conv2d,
}

impl ConvPair {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.silu()?)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    config: CodecConfig,
    enc_in: Conv2d,
    enc_stages: Vec<ConvPair>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<ConvPair>,
    dec_out: Conv2d,
}

impl LatentCodec {
    pub fn new(config: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let wide = 2 * c;
        let k = config.stages();
        let enc = vb.pp("encoder");
        let dec = vb.pp("decoder");
        let mut enc_stages = Vec::with_capacity(k);
        let mut prev = c;
        for i in 0..k {
            let vb = enc.pp(format!("stages.{i}"));
            enc_stages.push(ConvPair {
                a: conv3x3(prev, wide, 2, vb.pp("down"))?,
                b: conv3x3(wide, wide, 1, vb.pp("conv"))?,
            });
            prev = wide;
        }
        let top = if k == 0 { c } else { wide };
        let mut dec_stages = Vec::with_capacity(k);
        for i in 0..k {
            let vb = dec.pp(format!("stages.{i}"));
            let out = if i + 1 == k { c } else { wide };
            dec_stages.push(ConvPair {
                a: conv3x3(wide, wide, 1, vb.pp("conv"))?,
                b: conv3x3(wide, out, 1, vb.pp("up"))?,
            });
        }
        Ok(Self {
            config: config.clone(),
            enc_in: conv3x3(config.image_channels, c, 1, enc.pp("conv_in"))?,
            enc_stages,
            enc_out: conv3x3(top, 2 * config.z_channels, 1, enc.pp("conv_out"))?,
            dec_in: conv3x3(config.z_channels, if k == 0 { c } else { wide }, 1, dec.pp("conv_in"))?,
            dec_stages,
            dec_out: conv3x3(c, config.image_channels, 1, dec.pp("conv_out"))?,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| Error::validation("image", format!("expected (B, C, H, W), got {:?}", x.dims())))?;
        let f = self.config.downsample_factor;
        if c != self.config.image_channels || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::validation(
                "image",
                format!(
                    "shape {:?} needs {} channels and spatial dims divisible by {f}",
                    x.dims(),
                    self.config.image_channels
                ),
            ));
        }
        Ok(())
    }

    /// Posterior mean and log-variance, each `(B, z_channels, H/f, W/f)`.
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(x)?;
        let mut h = self.enc_in.forward(x)?.silu()?;
        for stage in &self.enc_stages {
            h = stage.forward(&h)?;
        }
        let moments = self.enc_out.forward(&h)?;
        let z = self.config.z_channels;
        let mu = moments.narrow(1, 0, z)?;
        let logvar = moments.narrow(1, z, z)?.clamp(-30.0, 20.0)?;
        Ok((mu, logvar))
    }

    /// Encodes `x` in model space. With `rng` the latent is a posterior draw
    /// `μ + σ·ε`; without it the latent is the mean.
    pub fn encode<R: Rng>(&self, x: &Tensor, rng: Option<&mut R>) -> Result<Encoded> {
        let (mu, logvar) = self.posterior(x)?;
        let sigma2 = logvar.exp()?;
        let z = match rng {
            Some(rng) => {
                let eps = gaussian(rng, mu.dims(), mu.dtype(), mu.device())?;
                (&mu + (eps * sigma2.sqrt()?)?)?
            }
            None => mu.clone(),
        };
        Ok(Encoded { mu, sigma2, z })
    }

    /// Decoder output before clamping; used by the training objective.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z
            .dims4()
            .map_err(|_| Error::validation("latent", format!("expected (B, C, h, w), got {:?}", z.dims())))?;
        if c != self.config.z_channels {
            return Err(Error::validation(
                "latent",
                format!("expected {} channels, got {c}", self.config.z_channels),
            ));
        }
        let mut h = self.dec_in.forward(z)?.silu()?;
        for stage in &self.dec_stages {
            let (_, _, hh, ww) = h.dims4()?;
            let up = stage.a.forward(&h)?.silu()?.upsample_nearest2d(hh * 2, ww * 2)?;
            h = stage.b.forward(&up)?.silu()?;
        }
        Ok(self.dec_out.forward(&h)?)
    }

    /// Image in model space, clamped to `[-1, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(-1.0, 1.0)?)
    }

    /// Mean absolute reconstruction error plus `kl_weight` times the KL divergence
    /// to `N(0, I)` (averaged per latent element).
    pub fn training_loss(&self, x: &Tensor, kl_weight: f64, rng: &mut impl Rng) -> Result<Tensor> {
        let (mu, logvar) = self.posterior(x)?;
        let eps = gaussian(rng, mu.dims(), mu.dtype(), mu.device())?;
        let z = (&mu + (eps * logvar.affine(0.5, 0.0)?.exp()?)?)?;
        let recon = (self.decode_raw(&z)? - x)?.abs()?.mean_all()?;
        let kl = ((mu.sqr()? + logvar.exp()? - &logvar)? - 1.0)?
            .sum_keepdim(D::Minus1)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        Ok((recon + kl.affine(kl_weight, 0.0)?)?)
    }
}
