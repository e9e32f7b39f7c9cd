use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::generate_sample;
use super::spec::{BuildingSpec, BuildingType};
use crate::control::FootprintMask;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "dataset.json";
pub const DEFAULT_SIZE: usize = 500;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One line of the manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub prompt: String,
    pub mask_path: String,
    pub plan_path: String,
    pub building_type: BuildingType,
    pub seed: u64,
    pub split: Split,
}

/// Relative weights per building type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMix(pub Vec<(BuildingType, f64)>);

impl Default for TypeMix {
    fn default() -> Self {
        Self(BuildingType::ALL.iter().map(|&t| (t, 1.0)).collect())
    }
}

impl TypeMix {
    pub fn only(t: BuildingType) -> Self {
        Self(vec![(t, 1.0)])
    }

    /// Largest-remainder apportionment of `n` records, so every count is
    /// within one of `n · fraction`.
    // negated comparisons so NaN weights are rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn counts(&self, n: usize) -> Result<Vec<(BuildingType, usize)>> {
        let total: f64 = self.0.iter().map(|(_, w)| *w).sum();
        if self.0.is_empty() || !(total > 0.0) || self.0.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::validation(
                "type_mix",
                "weights must be non-negative with a positive sum",
            ));
        }
        let mut seen = HashSet::new();
        if !self.0.iter().all(|(t, _)| seen.insert(*t)) {
            return Err(Error::validation("type_mix", "duplicate building type"));
        }
        let quotas: Vec<f64> = self.0.iter().map(|(_, w)| n as f64 * w / total).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        Ok(self.0.iter().map(|(t, _)| *t).zip(counts).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub mix: TypeMix,
    /// Also render 256×256 companions under `hires/`.
    pub hires: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            n: DEFAULT_SIZE,
            seed: 0,
            image_size: 64,
            mix: TypeMix::default(),
            hires: false,
        }
    }
}

/// Written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub counts: BTreeMap<BuildingType, usize>,
    pub train: usize,
    pub val: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

fn record_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Generates `opts.n` records under `dir` and writes the manifest and summary.
pub fn build_dataset(dir: &Path, opts: &DatasetOptions) -> Result<(Manifest, DatasetSummary)> {
    if opts.n == 0 {
        return Err(Error::validation("n", "must be at least 1"));
    }
    let counts = opts.mix.counts(opts.n)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    if opts.hires {
        let hires = dir.join("hires");
        std::fs::create_dir_all(&hires).map_err(|e| Error::io(&hires, e))?;
    }

    let mut types = Vec::with_capacity(opts.n);
    for (t, c) in &counts {
        types.extend(std::iter::repeat_n(*t, *c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..opts.n).collect();
    order.shuffle(&mut rng);
    let n_val = (opts.n as f64 * VAL_FRACTION).round() as usize;
    let val: HashSet<usize> = order[..n_val].iter().copied().collect();

    let mut records = Vec::with_capacity(opts.n);
    for (i, t) in types.iter().enumerate() {
        let seed = record_seed(opts.seed, i);
        let spec = BuildingSpec::sample(*t, seed);
        let sample = generate_sample(&spec, opts.image_size)?;
        let id = format!("{i:05}-{t}");
        let mask_rel = format!("images/{id}_mask.png");
        let plan_rel = format!("images/{id}_plan.png");
        sample.mask.to_grid().save_png(&dir.join(&mask_rel))?;
        sample.plan.save_png(&dir.join(&plan_rel))?;
        if opts.hires {
            let big = generate_sample(&spec, 256)?;
            big.plan.save_png(&dir.join(format!("hires/{id}_plan.png")))?;
        }
        records.push(DatasetRecord {
            id,
            prompt: sample.prompt,
            mask_path: mask_rel,
            plan_path: plan_rel,
            building_type: *t,
            seed,
            split: if val.contains(&i) { Split::Val } else { Split::Train },
        });
    }

    let mut warnings = Vec::new();
    if n_val == 0 {
        let w = format!("validation split is empty for n = {}", opts.n);
        log::warn!("{w}");
        warnings.push(w);
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    let summary = DatasetSummary {
        n: opts.n,
        seed: opts.seed,
        image_size: opts.image_size,
        counts: counts.into_iter().collect(),
        train: opts.n - n_val,
        val: n_val,
        warnings,
    };
    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((manifest, summary))
}

/// A record decoded into model space.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub id: String,
    pub prompt: String,
    pub building_type: BuildingType,
    pub plan: ImageGrid,
    pub mask: FootprintMask,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.path();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&path, e))
    }

    /// Reads `manifest.jsonl` from `dir` (or the file itself) and checks ids.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Record {
                id: format!("line {}", n + 1),
                reason: e.to_string(),
            })?;
            if r.prompt.trim().is_empty() {
                return Err(Error::Record {
                    id: r.id,
                    reason: "empty prompt".into(),
                });
            }
            if !ids.insert(r.id.clone()) {
                return Err(Error::Record {
                    id: r.id,
                    reason: "duplicate id".into(),
                });
            }
            records.push(r);
        }
        Ok(Self { root, records })
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Decodes one record, checking both files exist and agree in size.
    pub fn load_record(&self, r: &DatasetRecord) -> Result<LoadedRecord> {
        let bad = |reason: String| Error::Record {
            id: r.id.clone(),
            reason,
        };
        let plan = ImageGrid::load_png(&self.root.join(&r.plan_path)).map_err(|e| bad(format!("plan: {e}")))?;
        let mask_img = ImageGrid::load_png(&self.root.join(&r.mask_path)).map_err(|e| bad(format!("mask: {e}")))?;
        if (plan.height(), plan.width()) != (mask_img.height(), mask_img.width()) {
            return Err(bad(format!(
                "plan is {}x{} but mask is {}x{}",
                plan.height(),
                plan.width(),
                mask_img.height(),
                mask_img.width()
            )));
        }
        Ok(LoadedRecord {
            id: r.id.clone(),
            prompt: r.prompt.clone(),
            building_type: r.building_type,
            plan,
            mask: FootprintMask::from_grid(&mask_img),
        })
    }
}

/// A minibatch in model space.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(B, 3, H, W)` in [-1, 1].
    pub plans: Tensor,
    pub prompts: Vec<String>,
    /// `(B, 1, H, W)` in {0, 1}.
    pub masks: Tensor,
}

/// Decodes a split once and serves shuffled minibatches per epoch.
pub struct BatchLoader {
    records: Vec<LoadedRecord>,
    batch_size: usize,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl BatchLoader {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[LoadedRecord] {
        &self.records
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    /// Batches for `epoch`; the order depends only on `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|idx| {
                let recs: Vec<&LoadedRecord> = idx.iter().map(|&i| &self.records[i]).collect();
                let plans = recs
                    .iter()
                    .map(|r| r.plan.to_model_tensor(self.dtype, &self.device))
                    .collect::<Result<Vec<_>>>()?;
                let masks = recs
                    .iter()
                    .map(|r| r.mask.to_tensor(self.dtype, &self.device))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Batch {
                    ids: recs.iter().map(|r| r.id.clone()).collect(),
                    plans: Tensor::cat(&plans, 0)?,
                    prompts: recs.iter().map(|r| r.prompt.clone()).collect(),
                    masks: Tensor::cat(&masks, 0)?,
                })
            })
            .collect()
    }
}

pub fn load_batches(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<BatchLoader> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "must be at least 1"));
    }
    let records = manifest
        .split(split)
        .into_iter()
        .map(|r| manifest.load_record(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchLoader {
        records,
        batch_size,
        seed,
        dtype,
        device: device.clone(),
    })
}
