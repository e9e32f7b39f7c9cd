//! The ε-predicting U-Net with cross-attention on the design brief.
//!
//! The network is split into an [`UNetEncoder`] (timestep embedding, input
//! convolution, downsampling levels and the middle block) and an
//! [`UNetDecoder`]. The split is what the control branch clones: it copies the
//! encoder and feeds its per-level outputs back into the frozen decoder.

use candle_core::{Module, Tensor};
use candle_nn::{group_norm, Conv2d, GroupNorm, VarBuilder};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv3x3, groups_for, zero_conv3x3, Downsample, ResBlock, SpatialTransformer, TimeEmbedding, Upsample,
};
use super::text::TextContext;
use crate::diffusion::{Conditioning, Denoiser};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels of the latent being denoised (`z_channels` of the codec).
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level; level `i` runs at downsample factor `2^i`.
    pub channel_mults: Vec<usize>,
    /// Downsample factors that get a spatial transformer.
    pub attention_resolutions: Vec<usize>,
    pub transformer_depth: usize,
    pub time_embed_dim: usize,
    /// Width `d_τ` of the brief embedding.
    pub context_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            attention_resolutions: vec![4, 2, 1],
            transformer_depth: 1,
            time_embed_dim: 256,
            context_dim: 128,
            norm_groups: 32,
        }
    }
}

impl UNetConfig {
    /// Small network used for the single-core smoke profile.
    pub fn desk() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 16,
            channel_mults: vec![1, 2, 2],
            attention_resolutions: vec![4, 2, 1],
            transformer_depth: 1,
            time_embed_dim: 64,
            context_dim: 32,
            norm_groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || self.time_embed_dim == 0 {
            return Err(Error::validation("unet", "channel counts must be nonzero"));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::validation(
                "unet.channel_mults",
                "need at least one nonzero level",
            ));
        }
        if self.transformer_depth < 1 {
            return Err(Error::validation("unet.transformer_depth", "must be at least 1"));
        }
        let achievable: Vec<usize> = (0..self.channel_mults.len()).map(|i| 1 << i).collect();
        if let Some(r) = self.attention_resolutions.iter().find(|r| !achievable.contains(r)) {
            return Err(Error::validation(
                "unet.attention_resolutions",
                format!("factor {r} not among achievable factors {achievable:?}"),
            ));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&(1 << level))
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
    down: Option<Downsample>,
}

/// Features the decoder consumes: one skip per level plus the middle-block output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
    pub temb: Tensor,
}

/// Residuals a control branch adds to the decoder's inputs, shaped like [`EncoderOutput`].
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNetEncoder {
    config: UNetConfig,
    time_embed: TimeEmbedding,
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
    mid_res1: ResBlock,
    mid_attn: SpatialTransformer,
    mid_res2: ResBlock,
}

impl UNetEncoder {
    pub fn new(config: &UNetConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let chans = config.level_channels();
        let groups = config.norm_groups;
        let temb = config.time_embed_dim;
        let mut levels = Vec::with_capacity(chans.len());
        let mut prev = config.base_channels;
        for (i, &ch) in chans.iter().enumerate() {
            let vb = vb.pp(format!("levels.{i}"));
            levels.push(EncoderLevel {
                res: ResBlock::new(prev, ch, temb, groups, vb.pp("res"))?,
                attn: if config.has_attention(i) {
                    Some(SpatialTransformer::new(
                        ch,
                        config.context_dim,
                        config.transformer_depth,
                        groups,
                        vb.pp("attn"),
                    )?)
                } else {
                    None
                },
                down: if i + 1 < chans.len() {
                    Some(Downsample::new(ch, vb.pp("down"))?)
                } else {
                    None
                },
            });
            prev = ch;
        }
        let top = *chans.last().expect("validated non-empty");
        Ok(Self {
            config: config.clone(),
            time_embed: TimeEmbedding::new(config.base_channels, temb, vb.pp("time_embed"))?,
            conv_in: conv3x3(config.latent_channels, config.base_channels, 1, vb.pp("conv_in"))?,
            levels,
            mid_res1: ResBlock::new(top, top, temb, groups, vb.pp("mid.res1"))?,
            mid_attn: SpatialTransformer::new(
                top,
                config.context_dim,
                config.transformer_depth,
                groups,
                vb.pp("mid.attn"),
            )?,
            mid_res2: ResBlock::new(top, top, temb, groups, vb.pp("mid.res2"))?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z
            .dims4()
            .map_err(|_| Error::validation("latent", format!("expected (B, C, H, W), got {:?}", z.dims())))?;
        let m = self.config.spatial_multiple();
        if c != self.config.latent_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::validation(
                "latent",
                format!(
                    "shape {:?} needs {} channels and spatial dims divisible by {m}",
                    z.dims(),
                    self.config.latent_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, z_t: &Tensor, ts: &[usize], text: &TextContext) -> Result<EncoderOutput> {
        self.check_latent(z_t)?;
        if ts.len() != z_t.dim(0)? || text.batch() != z_t.dim(0)? {
            return Err(Error::validation(
                "batch",
                format!(
                    "latent batch {}, {} timesteps, text batch {}",
                    z_t.dim(0)?,
                    ts.len(),
                    text.batch()
                ),
            ));
        }
        let temb = self.time_embed.forward(ts, z_t)?;
        let ctx = &text.embedding;
        let mask = text.mask.as_ref();
        let mut h = self.conv_in.forward(z_t)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = level.res.forward(&h, &temb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward(&h, ctx, mask)?;
            }
            skips.push(h.clone());
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
            }
        }
        let h = self.mid_res1.forward(&h, &temb)?;
        let h = self.mid_attn.forward(&h, ctx, mask)?;
        let mid = self.mid_res2.forward(&h, &temb)?;
        Ok(EncoderOutput { skips, mid, temb })
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
    up: Option<Upsample>,
}

#[derive(Debug, Clone)]
pub struct UNetDecoder {
    /// Ordered from the coarsest level to the finest.
    levels: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNetDecoder {
    pub fn new(config: &UNetConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let chans = config.level_channels();
        let groups = config.norm_groups;
        let n = chans.len();
        let mut levels = Vec::with_capacity(n);
        let mut prev = chans[n - 1];
        for i in (0..n).rev() {
            let ch = chans[i];
            let vb = vb.pp(format!("levels.{i}"));
            levels.push(DecoderLevel {
                res: ResBlock::new(prev + ch, ch, config.time_embed_dim, groups, vb.pp("res"))?,
                attn: if config.has_attention(i) {
                    Some(SpatialTransformer::new(
                        ch,
                        config.context_dim,
                        config.transformer_depth,
                        groups,
                        vb.pp("attn"),
                    )?)
                } else {
                    None
                },
                up: if i > 0 {
                    Some(Upsample::new(ch, vb.pp("up"))?)
                } else {
                    None
                },
            });
            prev = ch;
        }
        Ok(Self {
            levels,
            out_norm: group_norm(groups_for(chans[0], groups), chans[0], 1e-5, vb.pp("out_norm"))?,
            out_conv: zero_conv3x3(chans[0], config.latent_channels, vb.pp("out_conv"))?,
        })
    }

    pub fn forward(
        &self,
        enc: &EncoderOutput,
        text: &TextContext,
        control: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        let ctx = &text.embedding;
        let mask = text.mask.as_ref();
        let mut h = match control {
            Some(c) => (&enc.mid + &c.mid)?,
            None => enc.mid.clone(),
        };
        let n = self.levels.len();
        for (k, level) in self.levels.iter().enumerate() {
            let i = n - 1 - k;
            let skip = match control {
                Some(c) => (&enc.skips[i] + &c.skips[i])?,
                None => enc.skips[i].clone(),
            };
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = level.res.forward(&h, &enc.temb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward(&h, ctx, mask)?;
            }
            if let Some(up) = &level.up {
                h = up.forward(&h)?;
            }
        }
        Ok(self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub encoder: UNetEncoder,
    pub decoder: UNetDecoder,
}

impl UNet {
    pub fn new(config: &UNetConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            encoder: UNetEncoder::new(config, vb.pp("encoder"))?,
            decoder: UNetDecoder::new(config, vb.pp("decoder"))?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        self.encoder.config()
    }

    pub fn forward(&self, z_t: &Tensor, ts: &[usize], text: &TextContext) -> Result<Tensor> {
        let enc = self.encoder.forward(z_t, ts, text)?;
        self.decoder.forward(&enc, text, None)
    }

    /// Spatially averaged middle-block activation, `(B, C_top)`.
    pub fn mid_features(&self, z_t: &Tensor, ts: &[usize], text: &TextContext) -> Result<Tensor> {
        let enc = self.encoder.forward(z_t, ts, text)?;
        Ok(enc.mid.mean(3)?.mean(2)?)
    }
}

impl Denoiser for UNet {
    fn predict_eps(&self, z_t: &Tensor, ts: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.forward(z_t, ts, &cond.text)
    }
}
