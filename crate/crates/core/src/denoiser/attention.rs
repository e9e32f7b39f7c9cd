//! Scaled dot-product attention with queries from flattened U-Net features and
//! keys/values from a context sequence.

use candle_core::{Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};

use crate::error::{Error, Result};

/// Projection weights of one attention layer.
///
/// `W_Q: d × d_ε`, `W_K, W_V: d × d_ctx`, and an output projection `d_ε × d`
/// that maps the attended values back to the feature width.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    inner: usize,
    feature_dim: usize,
    context_dim: usize,
}

impl AttentionWeights {
    pub fn new(vb: VarBuilder, feature_dim: usize, context_dim: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            to_q: linear_no_bias(feature_dim, inner, vb.pp("to_q"))?,
            to_k: linear_no_bias(context_dim, inner, vb.pp("to_k"))?,
            to_v: linear_no_bias(context_dim, inner, vb.pp("to_v"))?,
            to_out: linear(inner, feature_dim, vb.pp("to_out"))?,
            inner,
            feature_dim,
            context_dim,
        })
    }

    /// Builds weights from explicit matrices (`out_features × in_features`) with a zero output bias.
    pub fn from_matrices(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_out: Tensor) -> Result<Self> {
        let (inner, feature_dim) = w_q.dims2()?;
        let (k_rows, context_dim) = w_k.dims2()?;
        if k_rows != inner || w_v.dims2()? != (inner, context_dim) || w_out.dims2()? != (feature_dim, inner) {
            return Err(Error::validation(
                "attention weights",
                "W_Q, W_K, W_V must share the inner width and W_out must map it back",
            ));
        }
        let bias = Tensor::zeros(feature_dim, w_out.dtype(), w_out.device())?;
        Ok(Self {
            to_q: Linear::new(w_q, None),
            to_k: Linear::new(w_k, None),
            to_v: Linear::new(w_v, None),
            to_out: Linear::new(w_out, Some(bias)),
            inner,
            feature_dim,
            context_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }
}

/// `softmax(QKᵀ/√d)·V` followed by the output projection.
///
/// `features: (B, N, d_ε)`, `context: (B, L, d_ctx)`, optional `mask: (B, L)`
/// with zeros on padded context rows.
pub fn cross_attention(
    features: &Tensor,
    context: &Tensor,
    mask: Option<&Tensor>,
    weights: &AttentionWeights,
) -> Result<Tensor> {
    let (probs, v) = attend(features, context, mask, weights)?;
    Ok(weights.to_out.forward(&probs.matmul(&v)?)?)
}

/// The `(B, N, L)` row-stochastic attention matrix of [`cross_attention`].
pub fn attention_probs(
    features: &Tensor,
    context: &Tensor,
    mask: Option<&Tensor>,
    weights: &AttentionWeights,
) -> Result<Tensor> {
    Ok(attend(features, context, mask, weights)?.0)
}

fn attend(
    features: &Tensor,
    context: &Tensor,
    mask: Option<&Tensor>,
    w: &AttentionWeights,
) -> Result<(Tensor, Tensor)> {
    let (b, _, fd) = features.dims3()?;
    let (cb, l, cd) = context.dims3()?;
    if fd != w.feature_dim || cd != w.context_dim {
        return Err(Error::validation(
            "attention input",
            format!(
                "weights expect feature width {} and context width {}, got {fd} and {cd}",
                w.feature_dim, w.context_dim
            ),
        ));
    }
    if cb != b {
        return Err(Error::validation(
            "attention input",
            format!("feature batch {b} vs context batch {cb}"),
        ));
    }
    let q = w.to_q.forward(features)?;
    let k = w.to_k.forward(context)?;
    let v = w.to_v.forward(context)?;
    let mut logits = (q.matmul(&k.t()?)? / (w.inner as f64).sqrt())?;
    if let Some(mask) = mask {
        if mask.dims() != [b, l] {
            return Err(Error::validation(
                "attention mask",
                format!("expected ({b}, {l}), got {:?}", mask.dims()),
            ));
        }
        // 0 for kept keys, -1e9 for padding.
        let bias = mask.affine(1e9, -1e9)?.unsqueeze(1)?;
        logits = logits.broadcast_add(&bias)?;
    }
    let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
    Ok((probs, v))
}
