//! Brief tokenization and the frozen text embedder.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 32;

/// Lowercases, drops punctuation and splits on whitespace. At most [`MAX_TOKENS`] tokens.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .take(MAX_TOKENS)
        .collect()
}

/// Maps token sequences to `L × d` embeddings. Implementations must be pure
/// functions of their construction parameters; training never updates them.
pub trait TextEmbedder: Send + Sync {
    fn info(&self) -> EmbedderInfo;

    fn dim(&self) -> usize;

    /// Vocabulary index of a normalized token.
    fn token_id(&self, token: &str) -> u32;

    /// Row-major `tokens.len() × dim` embedding.
    fn embed_ids(&self, ids: &[u32]) -> Vec<f32>;

    /// Digest of every weight the embedder owns.
    fn checksum(&self) -> String;
}

/// What a checkpoint records so embeddings can be rebuilt on another machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub kind: String,
    pub seed: u64,
    pub vocab_rows: usize,
    pub dim: usize,
    pub max_tokens: usize,
}

impl EmbedderInfo {
    pub fn build(&self) -> Result<HashEmbedder> {
        if self.kind != HashEmbedder::KIND {
            return Err(Error::validation(
                "embedder.kind",
                format!("no built-in embedder named {:?}", self.kind),
            ));
        }
        HashEmbedder::new(self.seed, self.vocab_rows, self.dim)
    }
}

/// Seeded Gaussian lookup table addressed by a 64-bit FNV-1a hash of the token.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    rows: usize,
    dim: usize,
    table: Vec<f32>,
}

impl HashEmbedder {
    pub const KIND: &'static str = "fnv-hash-table";

    pub fn new(seed: u64, rows: usize, dim: usize) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::validation("embedder", "rows and dim must be nonzero"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..rows * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Ok(Self { seed, rows, dim, table })
    }
}

impl TextEmbedder for HashEmbedder {
    fn info(&self) -> EmbedderInfo {
        EmbedderInfo {
            kind: Self::KIND.to_string(),
            seed: self.seed,
            vocab_rows: self.rows,
            dim: self.dim,
            max_tokens: MAX_TOKENS,
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn token_id(&self, token: &str) -> u32 {
        (fnv1a(token.as_bytes()) % self.rows as u64) as u32
    }

    fn embed_ids(&self, ids: &[u32]) -> Vec<f32> {
        ids.iter()
            .flat_map(|&id| {
                let start = id as usize * self.dim;
                self.table[start..start + self.dim].iter().copied()
            })
            .collect()
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.table {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A tokenized and embedded design brief.
#[derive(Debug, Clone)]
pub struct TextBrief {
    pub raw: String,
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    /// `L × d_τ`, row-major.
    pub embedding: Vec<f32>,
    pub dim: usize,
}

impl TextBrief {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn embed_text(embedder: &dyn TextEmbedder, raw: &str) -> Result<TextBrief> {
    let tokens = tokenize(raw);
    if tokens.is_empty() {
        return Err(Error::validation("prompt", "empty after normalization"));
    }
    let ids: Vec<u32> = tokens.iter().map(|t| embedder.token_id(t)).collect();
    let embedding = embedder.embed_ids(&ids);
    Ok(TextBrief {
        raw: raw.to_string(),
        tokens,
        ids,
        embedding,
        dim: embedder.dim(),
    })
}

/// Batched context for cross-attention: `(B, L, d_τ)` plus an optional `(B, L)`
/// mask with 1 for real tokens and 0 for padding.
#[derive(Debug, Clone)]
pub struct TextContext {
    pub embedding: Tensor,
    pub mask: Option<Tensor>,
}

impl TextContext {
    pub fn new(embedding: Tensor, mask: Option<Tensor>) -> Self {
        Self { embedding, mask }
    }

    /// Pads briefs to the longest one; the mask is omitted when nothing is padded.
    pub fn from_briefs(briefs: &[TextBrief], dtype: DType, device: &Device) -> Result<Self> {
        let first = briefs
            .first()
            .ok_or_else(|| Error::validation("briefs", "empty batch"))?;
        let dim = first.dim;
        if briefs.iter().any(|b| b.dim != dim) {
            return Err(Error::validation("briefs", "mixed embedding widths"));
        }
        let longest = briefs.iter().map(TextBrief::len).max().unwrap_or(0);
        let mut data = Vec::with_capacity(briefs.len() * longest * dim);
        let mut mask = Vec::with_capacity(briefs.len() * longest);
        for b in briefs {
            data.extend_from_slice(&b.embedding);
            data.resize(data.len() + (longest - b.len()) * dim, 0.0);
            mask.extend((0..longest).map(|i| if i < b.len() { 1f32 } else { 0.0 }));
        }
        let embedding = Tensor::from_vec(data, (briefs.len(), longest, dim), device)?.to_dtype(dtype)?;
        let padded = briefs.iter().any(|b| b.len() < longest);
        let mask = if padded {
            Some(Tensor::from_vec(mask, (briefs.len(), longest), device)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self { embedding, mask })
    }

    pub fn batch(&self) -> usize {
        self.embedding.dims()[0]
    }
}
