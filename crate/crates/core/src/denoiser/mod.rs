//! Latent codec, brief embedding and the cross-attention U-Net.

mod attention;
mod codec;
mod layers;
mod text;
mod unet;

pub use attention::{attention_probs, cross_attention, AttentionWeights};
pub use codec::{CodecConfig, Encoded, LatentCodec};
pub use text::{embed_text, tokenize, EmbedderInfo, HashEmbedder, TextBrief, TextContext, TextEmbedder, MAX_TOKENS};
pub use unet::{ControlResiduals, EncoderOutput, UNet, UNetConfig, UNetDecoder, UNetEncoder};

pub(crate) use layers::conv3x3;
