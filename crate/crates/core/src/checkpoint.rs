//! Single-file checkpoints: safetensors weights keyed by dotted names, with the
//! run metadata stored as JSON in the safetensors header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{CodecConfig, EmbedderInfo, UNetConfig};
use crate::diffusion::{ScheduleParams, Stage};
use crate::error::{Error, Result};

const META_KEY: &str = "floorgen";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    /// Optimizer steps taken by the stage that produced this file.
    pub step_count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub image_size: usize,
    pub schedule: ScheduleParams,
    pub codec: CodecConfig,
    pub unet: UNetConfig,
    pub embedder: EmbedderInfo,
    /// Multiplier applied to codec means before diffusion.
    pub latent_scale: f64,
    /// False for freshly initialized weights.
    pub trained: bool,
    /// For stage-2 files: digest of the stage-1 denoiser the control branch was cloned from.
    pub base_checksum: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        let data: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(data, Some(info), path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing metadata block".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", meta.format_version)));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)
            .map_err(|e| bad(e.to_string()))?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }

    /// Tensors under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn section_checksum(&self, prefix: &str) -> Result<String> {
        let s: BTreeMap<String, Tensor> = self.section(prefix).into_iter().collect();
        weights_checksum(&s)
    }

    /// Casts every tensor, e.g. to run a 32-bit checkpoint at 64 bits.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            meta: self.meta.clone(),
            tensors,
        })
    }
}

/// Prefixes every name in `vars` and detaches the values.
pub fn snapshot(vars: &VarMap, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    let data = vars.data().lock().expect("varmap lock poisoned");
    data.iter()
        .map(|(k, v)| Ok((format!("{prefix}.{k}"), v.as_tensor().detach().copy()?)))
        .collect()
}

/// SHA-256 over names, dtypes, shapes and little-endian values, in name order.
pub fn weights_checksum(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    h.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn varmap_checksum(vars: &VarMap) -> Result<String> {
    let data = vars.data().lock().expect("varmap lock poisoned");
    let map: BTreeMap<String, Tensor> = data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    weights_checksum(&map)
}
