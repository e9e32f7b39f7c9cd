use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{CodecConfig, EmbedderInfo, HashEmbedder, UNetConfig, MAX_TOKENS};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::train::{LrDecay, OptimizerConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTraining {
    pub optimizer: OptimizerConfig,
    pub kl_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Directory holding `manifest.jsonl`; relative paths resolve against the output dir.
    pub path: PathBuf,
    pub n: usize,
    #[serde(default)]
    pub hires: bool,
}

/// Everything a run needs. All randomness is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    #[serde(default)]
    pub precision: Precision,
    pub schedule: ScheduleParams,
    pub codec: CodecConfig,
    pub codec_training: CodecTraining,
    pub unet: UNetConfig,
    /// Rows of the hashed token table; its width is `unet.context_dim`.
    pub text_vocab_rows: usize,
    pub stage1: OptimizerConfig,
    pub stage2: OptimizerConfig,
    pub dataset: DatasetConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            precision: Precision::F32,
            schedule: ScheduleParams::default(),
            codec: CodecConfig::default(),
            codec_training: CodecTraining {
                optimizer: OptimizerConfig {
                    lr: 1e-3,
                    epochs: 50,
                    ..OptimizerConfig::default()
                },
                kl_weight: 1e-6,
            },
            unet: UNetConfig::default(),
            text_vocab_rows: 4096,
            stage1: OptimizerConfig::default(),
            stage2: OptimizerConfig::default(),
            dataset: DatasetConfig {
                path: PathBuf::from("dataset"),
                n: 500,
                hires: false,
            },
            output: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Smoke-test sizes: 32-pixel images, eight timesteps, five epochs per stage.
    pub fn desk() -> Self {
        let quick = OptimizerConfig {
            lr: 1e-3,
            epochs: 5,
            batch_size: 1,
            max_steps: None,
            decay: LrDecay::Cosine,
        };
        Self {
            image_size: 32,
            schedule: ScheduleParams {
                steps: 8,
                beta_start: 0.1,
                beta_end: 0.7,
            },
            codec: CodecConfig::desk(),
            codec_training: CodecTraining {
                optimizer: OptimizerConfig {
                    lr: 2e-3,
                    ..quick.clone()
                },
                kl_weight: 1e-6,
            },
            unet: UNetConfig::desk(),
            text_vocab_rows: 1024,
            stage1: quick.clone(),
            stage2: quick,
            dataset: DatasetConfig {
                path: PathBuf::from("dataset"),
                n: 64,
                hires: false,
            },
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "default" | "full" => Ok(Self::default()),
            other => Err(Error::validation(
                "profile",
                format!("unknown profile {other:?} (desk, full)"),
            )),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Dataset directory, resolved against the output dir when relative.
    pub fn dataset_dir(&self) -> PathBuf {
        if self.dataset.path.is_absolute() {
            self.dataset.path.clone()
        } else {
            self.output.join(&self.dataset.path)
        }
    }

    pub fn embedder_info(&self) -> EmbedderInfo {
        EmbedderInfo {
            kind: HashEmbedder::KIND.to_string(),
            seed: derive_seed(self.seed, "text"),
            vocab_rows: self.text_vocab_rows,
            dim: self.unet.context_dim,
            max_tokens: MAX_TOKENS,
        }
    }

    /// SHA-256 of the JSON form with the location fields blanked, so moving a
    /// run to another directory keeps its hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.dataset.path = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::validation("image_size", "must be at least 16"));
        }
        self.codec.validate()?;
        self.unet.validate()?;
        let multiple = self.codec.downsample_factor * self.unet.spatial_multiple();
        if self.image_size % multiple != 0 {
            return Err(Error::validation(
                "image_size",
                format!(
                    "{} is not divisible by {multiple} (codec factor × U-Net levels)",
                    self.image_size
                ),
            ));
        }
        if self.unet.latent_channels != self.codec.z_channels {
            return Err(Error::validation(
                "unet.latent_channels",
                format!(
                    "{} differs from codec.z_channels {}",
                    self.unet.latent_channels, self.codec.z_channels
                ),
            ));
        }
        self.schedule.build()?;
        self.codec_training.optimizer.validate()?;
        if !(self.codec_training.kl_weight >= 0.0 && self.codec_training.kl_weight.is_finite()) {
            return Err(Error::validation(
                "codec_training.kl_weight",
                "must be a finite non-negative number",
            ));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.text_vocab_rows == 0 {
            return Err(Error::validation("text_vocab_rows", "must be at least 1"));
        }
        if self.dataset.n == 0 {
            return Err(Error::validation("dataset.n", "must be at least 1"));
        }
        Ok(())
    }
}

/// Independent stream seed for a named purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
