use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::artifacts::RunRecorder;
use super::config::{derive_seed, RunConfig};
use crate::checkpoint::{snapshot, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::control::ControlledModel;
use crate::data::{LoadedRecord, Manifest, Split};
use crate::denoiser::{embed_text, LatentCodec, TextEmbedder, UNet};
use crate::diffusion::Stage;
use crate::error::{Error, Result};
use crate::params::seeded_builder;
use crate::train::{encode_latents, latent_scale, train_codec, train_stage1, train_stage2, Example, LossCurve};

pub const STAGE1_FILE: &str = "checkpoints/stage1.safetensors";
pub const STAGE2_FILE: &str = "checkpoints/stage2.safetensors";

/// Loads every record of `split`, requiring the configured image size.
pub fn load_split(manifest: &Manifest, split: Split, image_size: usize) -> Result<Vec<LoadedRecord>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| {
            let rec = manifest.load_record(r)?;
            if rec.plan.height() != image_size || rec.plan.width() != image_size {
                return Err(Error::validation(
                    "image_size",
                    format!(
                        "record {} is {}x{} but the config expects {image_size}",
                        rec.id,
                        rec.plan.height(),
                        rec.plan.width()
                    ),
                ));
            }
            Ok(rec)
        })
        .collect()
}

/// Model-space plan tensors `(1, 3, H, W)`.
pub fn plan_tensors(records: &[LoadedRecord], cfg: &RunConfig, device: &Device) -> Result<Vec<Tensor>> {
    records
        .iter()
        .map(|r| r.plan.to_model_tensor(cfg.dtype(), device))
        .collect()
}

/// Pairs encoded latents with embedded briefs and mask tensors.
pub fn make_examples(
    records: &[LoadedRecord],
    latents: Vec<Tensor>,
    embedder: &dyn TextEmbedder,
    cfg: &RunConfig,
    device: &Device,
) -> Result<Vec<Example>> {
    records
        .iter()
        .zip(latents)
        .map(|(r, latent)| {
            Ok(Example {
                latent,
                brief: embed_text(embedder, &r.prompt)?,
                mask: r.mask.to_tensor(cfg.dtype(), device)?,
            })
        })
        .collect()
}

fn meta(
    cfg: &RunConfig,
    stage: Stage,
    steps: usize,
    latent_scale: f64,
    base: Option<String>,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage,
        step_count: steps,
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        image_size: cfg.image_size,
        schedule: cfg.schedule,
        codec: cfg.codec.clone(),
        unet: cfg.unet.clone(),
        embedder: cfg.embedder_info(),
        latent_scale,
        trained: steps > 0,
        base_checksum: base,
    })
}

/// Rebuilds the codec from the `codec.*` section of a checkpoint.
pub fn codec_from_checkpoint(ck: &Checkpoint, cfg_dtype: candle_core::DType, device: &Device) -> Result<LatentCodec> {
    let tensors: HashMap<String, Tensor> = ck
        .section("codec")
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(cfg_dtype)?)))
        .collect::<Result<_>>()?;
    if tensors.is_empty() {
        return Err(Error::Checkpoint {
            path: PathBuf::new(),
            reason: "no codec weights".into(),
        });
    }
    LatentCodec::new(&ck.meta.codec, VarBuilder::from_tensors(tensors, cfg_dtype, device))
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: PathBuf,
    pub curve: LossCurve,
    pub codec_curve: Option<LossCurve>,
}

/// Trains the codec and the text-conditioned denoiser on the train split and
/// writes a checkpoint holding both.
pub fn run_stage1(cfg: &RunConfig, rec: &mut RunRecorder) -> Result<StageOutcome> {
    let device = Device::Cpu;
    let dtype = cfg.dtype();
    rec.phase("load");
    let manifest = Manifest::load(&cfg.dataset_dir())?;
    let train = load_split(&manifest, Split::Train, cfg.image_size)?;
    let val = load_split(&manifest, Split::Val, cfg.image_size)?;
    if train.is_empty() {
        return Err(Error::validation("dataset", "train split is empty"));
    }
    let embedder = cfg.embedder_info().build()?;

    rec.phase("codec");
    let codec_vars = VarMap::new();
    let codec = LatentCodec::new(
        &cfg.codec,
        seeded_builder(&codec_vars, derive_seed(cfg.seed, "codec"), dtype, &device),
    )?;
    let images = plan_tensors(&train, cfg, &device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "codec-train"));
    let codec_curve = train_codec(
        &codec,
        &codec_vars,
        &images,
        &cfg.codec_training.optimizer,
        cfg.codec_training.kl_weight,
        &mut rng,
    )?;
    let scale = latent_scale(&codec, &images)?;

    rec.phase("stage1");
    let train_ex = make_examples(&train, encode_latents(&codec, &images, scale)?, &embedder, cfg, &device)?;
    let val_images = plan_tensors(&val, cfg, &device)?;
    let val_ex = make_examples(
        &val,
        encode_latents(&codec, &val_images, scale)?,
        &embedder,
        cfg,
        &device,
    )?;
    let unet_vars = VarMap::new();
    let unet = UNet::new(
        &cfg.unet,
        seeded_builder(&unet_vars, derive_seed(cfg.seed, "unet"), dtype, &device),
    )?;
    let schedule = cfg.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage1"));
    let curve = train_stage1(&unet, &unet_vars, &train_ex, &val_ex, &schedule, &cfg.stage1, &mut rng)?;

    rec.phase("save");
    let mut tensors = snapshot(&codec_vars, "codec")?;
    tensors.extend(snapshot(&unet_vars, "unet")?);
    let ck = Checkpoint {
        meta: meta(cfg, Stage::One, curve.step_count(), scale, None)?,
        tensors,
    };
    let path = cfg.output.join(STAGE1_FILE);
    save_checkpoint(&ck, &path, rec)?;
    write_curve(&curve, &cfg.output.join("train/stage1_loss.csv"), rec)?;
    write_curve(&codec_curve, &cfg.output.join("train/codec_loss.csv"), rec)?;
    Ok(StageOutcome {
        checkpoint: path,
        curve,
        codec_curve: Some(codec_curve),
    })
}

/// Trains the control branch on top of the frozen stage-1 checkpoint.
///
/// Fails if the frozen weights changed, which would mean the freeze leaked.
pub fn run_stage2(cfg: &RunConfig, stage1: &Path, rec: &mut RunRecorder) -> Result<StageOutcome> {
    let device = Device::Cpu;
    let dtype = cfg.dtype();
    rec.phase("load");
    let ck1 = Checkpoint::load(stage1, &device)?;
    if ck1.meta.stage != Stage::One {
        return Err(Error::validation("stage1 checkpoint", "is not a stage-1 checkpoint"));
    }
    if ck1.meta.config_hash != cfg.hash()? {
        log::warn!("stage-1 checkpoint was trained under a different config hash");
    }
    let manifest = Manifest::load(&cfg.dataset_dir())?;
    let train = load_split(&manifest, Split::Train, cfg.image_size)?;
    let val = load_split(&manifest, Split::Val, cfg.image_size)?;
    let embedder = cfg.embedder_info().build()?;
    let codec = codec_from_checkpoint(&ck1, dtype, &device)?;
    let scale = ck1.meta.latent_scale;
    let train_ex = make_examples(
        &train,
        encode_latents(&codec, &plan_tensors(&train, cfg, &device)?, scale)?,
        &embedder,
        cfg,
        &device,
    )?;
    let val_ex = make_examples(
        &val,
        encode_latents(&codec, &plan_tensors(&val, cfg, &device)?, scale)?,
        &embedder,
        cfg,
        &device,
    )?;

    rec.phase("stage2");
    let base_checksum = ck1.section_checksum("unet")?;
    let base: HashMap<String, Tensor> = ck1.section("unet");
    let model = ControlledModel::clone_and_freeze(
        &base,
        &ck1.meta.unet,
        ck1.meta.codec.downsample_factor,
        derive_seed(cfg.seed, "control"),
        dtype,
        &device,
    )?;
    let before = model.frozen_checksum()?;
    let schedule = ck1.meta.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage2"));
    let curve = train_stage2(&model, &train_ex, &val_ex, &schedule, &cfg.stage2, &mut rng)?;
    if model.frozen_checksum()? != before {
        return Err(Error::Generation(
            "frozen stage-1 weights changed during stage 2".into(),
        ));
    }

    rec.phase("save");
    let mut tensors: BTreeMap<String, Tensor> = ck1
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with("codec."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    tensors.extend(
        ck1.tensors
            .iter()
            .filter(|(k, _)| k.starts_with("unet."))
            .map(|(k, v)| (k.clone(), v.clone())),
    );
    tensors.extend(snapshot(model.vars(), "control")?);
    let mut m = meta(cfg, Stage::Two, curve.step_count(), scale, Some(base_checksum))?;
    m.schedule = ck1.meta.schedule;
    m.unet = ck1.meta.unet.clone();
    m.codec = ck1.meta.codec.clone();
    m.embedder = ck1.meta.embedder.clone();
    m.image_size = ck1.meta.image_size;
    let ck = Checkpoint { meta: m, tensors };
    let path = cfg.output.join(STAGE2_FILE);
    save_checkpoint(&ck, &path, rec)?;
    write_curve(&curve, &cfg.output.join("train/stage2_loss.csv"), rec)?;
    Ok(StageOutcome {
        checkpoint: path,
        curve,
        codec_curve: None,
    })
}

fn save_checkpoint(ck: &Checkpoint, path: &Path, rec: &mut RunRecorder) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    ck.save(path)?;
    rec.record(path)
}

fn write_curve(curve: &LossCurve, path: &Path, rec: &mut RunRecorder) -> Result<()> {
    rec.write(path, curve.to_csv().as_bytes())
}
