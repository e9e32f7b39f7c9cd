use candle_core::{Module, Tensor, D};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder};

use super::attention::{cross_attention, AttentionWeights};
use crate::error::Result;

/// Layer norm over the last axis, built from plain tensor ops so it works at
/// any float precision and stays differentiable.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub(crate) fn groups_for(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

pub(crate) fn conv3x3(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(conv2d(c_in, c_out, 3, cfg, vb)?)
}

/// 3×3 convolution with zero weights and bias, so the branch it ends starts silent.
pub(crate) fn zero_conv3x3(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((c_out, c_in, 3, 3), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(c_out, "bias", Init::Const(0.0))?;
    let cfg = Conv2dConfig {
        padding: 1,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub(crate) fn zero_linear(d_in: usize, d_out: usize, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((d_out, d_in), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(d_out, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

pub(crate) fn conv1x1(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(conv2d(c_in, c_out, 1, Conv2dConfig::default(), vb)?)
}

/// Sinusoidal timestep features of width `dim` for each entry of `ts`.
pub(crate) fn timestep_features(ts: &[usize], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        v.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

#[derive(Debug, Clone)]
pub(crate) struct TimeEmbedding {
    base: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(base: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            base,
            lin1: linear(base, dim, vb.pp("0"))?,
            lin2: linear(dim, dim, vb.pp("2"))?,
        })
    }

    pub fn forward(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        let f = timestep_features(ts, self.base, like)?;
        Ok(self.lin2.forward(&self.lin1.forward(&f)?.silu()?)?)
    }
}

/// Two 3×3 convolutions with a timestep-conditioned shift in between.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(c_in: usize, c_out: usize, temb: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(groups_for(c_in, groups), c_in, 1e-5, vb.pp("norm1"))?,
            conv1: conv3x3(c_in, c_out, 1, vb.pp("conv1"))?,
            time_proj: linear(temb, c_out, vb.pp("time_proj"))?,
            norm2: group_norm(groups_for(c_out, groups), c_out, 1e-5, vb.pp("norm2"))?,
            conv2: zero_conv3x3(c_out, c_out, vb.pp("conv2"))?,
            skip: if c_in == c_out {
                None
            } else {
                Some(conv1x1(c_in, c_out, vb.pp("skip"))?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let shift = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let residual = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + residual)?)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

/// Self-attention, cross-attention on the brief, then a feed-forward layer,
/// each pre-normalized and residual.
#[derive(Debug, Clone)]
struct BasicTransformerBlock {
    norm1: LayerNorm,
    self_attn: AttentionWeights,
    norm2: LayerNorm,
    cross_attn: AttentionWeights,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl BasicTransformerBlock {
    fn new(dim: usize, context_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            self_attn: AttentionWeights::new(vb.pp("attn1"), dim, dim, dim)?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            cross_attn: AttentionWeights::new(vb.pp("attn2"), dim, context_dim, dim)?,
            norm3: LayerNorm::new(dim, 1e-5, vb.pp("norm3"))?,
            ff: FeedForward {
                lin1: linear(dim, dim * 2, vb.pp("ff.0"))?,
                lin2: linear(dim * 2, dim, vb.pp("ff.2"))?,
            },
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + cross_attention(&h, &h, None, &self.self_attn)?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + cross_attention(&h, context, mask, &self.cross_attn)?)?;
        let h = self.norm3.forward(&x)?;
        let h = self.ff.lin2.forward(&self.ff.lin1.forward(&h)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Flattens a feature map into `(B, H·W, C)` tokens, runs transformer blocks
/// against the brief, and folds the result back in residually.
#[derive(Debug, Clone)]
pub(crate) struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    blocks: Vec<BasicTransformerBlock>,
    proj_out: Linear,
}

impl SpatialTransformer {
    pub fn new(channels: usize, context_dim: usize, depth: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| BasicTransformerBlock::new(channels, context_dim, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            norm: group_norm(groups_for(channels, groups), channels, 1e-6, vb.pp("norm"))?,
            proj_in: linear(channels, channels, vb.pp("proj_in"))?,
            blocks,
            proj_out: zero_linear(channels, channels, vb.pp("proj_out"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let mut t = self.proj_in.forward(&tokens)?;
        for block in &self.blocks {
            t = block.forward(&t, context, mask)?;
        }
        let t = self.proj_out.forward(&t)?;
        let t = t.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + t)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: conv3x3(channels, channels, 2, vb.pp("conv"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: conv3x3(channels, channels, 1, vb.pp("conv"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_choice() {
        assert_eq!(groups_for(32, 8), 8);
        assert_eq!(groups_for(12, 8), 6);
        assert_eq!(groups_for(3, 8), 3);
        assert_eq!(groups_for(7, 8), 7);
        assert_eq!(groups_for(14, 8), 7);
    }
}
