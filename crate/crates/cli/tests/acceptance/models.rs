//! Criteria that train or run the networks at desk scale (32-pixel plans,
//! 8x8x4 latents, single CPU core).

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use floorgen::checkpoint::{snapshot, varmap_checksum, weights_checksum, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use floorgen::control::ControlledModel;
use floorgen::data::{generate_sample, prompt_from_spec, BuildingSpec, BuildingType, Footprint, LoadedRecord};
use floorgen::denoiser::{
    embed_text, CodecConfig, EmbedderInfo, HashEmbedder, LatentCodec, TextContext, UNet, UNetConfig, MAX_TOKENS,
};
use floorgen::diffusion::{gaussian, Conditioning, Denoiser, ScheduleParams, Stage};
use floorgen::grid::{iou, SILHOUETTE_THRESHOLD};
use floorgen::params::{jitter, seeded_builder};
use floorgen::pipeline::{steps_fidelity_sweep, Generator};
use floorgen::train::{
    encode_latents, evaluate_loss, latent_scale, train_codec, train_stage1, train_stage2, Example, LrDecay,
    OptimizerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{fail, verdict, Check};

const DT: DType = DType::F32;
const SIZE: usize = 32;
const DESK_SCHEDULE: ScheduleParams = ScheduleParams {
    steps: 8,
    beta_start: 0.1,
    beta_end: 0.7,
};
const OVERFIT_STEPS: usize = 2000;
const EVAL_DRAWS: usize = 2;
const EVAL_SEED: u64 = 7;

fn overfit_opt(steps: usize) -> OptimizerConfig {
    OptimizerConfig {
        lr: 2e-3,
        epochs: 1_000_000,
        batch_size: 1,
        max_steps: Some(steps),
        decay: LrDecay::Cosine,
    }
}

fn embedder_info() -> EmbedderInfo {
    EmbedderInfo {
        kind: HashEmbedder::KIND.into(),
        seed: 0,
        vocab_rows: 1024,
        dim: UNetConfig::desk().context_dim,
        max_tokens: MAX_TOKENS,
    }
}

/// Eight overfit triples (one per building type) and four conditioning
/// triples (one type, one brief, four footprint shapes), encoded by a codec
/// trained on all twelve plans.
struct Corpus {
    codec: BTreeMap<String, Tensor>,
    scale: f64,
    overfit: Vec<Example>,
    overfit_records: Vec<LoadedRecord>,
    cond: Vec<Example>,
    cond_records: Vec<LoadedRecord>,
    secs: f64,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| build_corpus().expect("corpus"))
}

fn record(spec: &BuildingSpec, prompt: String) -> floorgen::Result<LoadedRecord> {
    let s = generate_sample(spec, SIZE)?;
    Ok(LoadedRecord {
        id: format!("{}-{}", spec.building_type.as_str(), spec.seed),
        prompt,
        building_type: spec.building_type,
        plan: s.plan,
        mask: s.mask,
    })
}

fn build_corpus() -> floorgen::Result<Corpus> {
    let start = Instant::now();
    let dev = Device::Cpu;
    let mut records = Vec::new();
    for (i, t) in BuildingType::ALL.iter().enumerate() {
        let spec = BuildingSpec::sample(*t, 100 + i as u64);
        records.push(record(&spec, prompt_from_spec(&spec))?);
    }
    let shapes = [
        Footprint::Rectangle,
        Footprint::LShape,
        Footprint::Ellipse,
        Footprint::RoundedRect,
    ];
    for (i, f) in shapes.iter().enumerate() {
        let spec = BuildingSpec::new(BuildingType::TwoBedroomApartment, *f, 300 + i as u64);
        records.push(record(&spec, prompt_from_spec(&spec))?);
    }
    let images = records
        .iter()
        .map(|r| r.plan.to_model_tensor(DT, &dev))
        .collect::<floorgen::Result<Vec<_>>>()?;
    let vars = VarMap::new();
    let codec = LatentCodec::new(&CodecConfig::desk(), seeded_builder(&vars, 1, DT, &dev))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opt = OptimizerConfig {
        lr: 2e-3,
        epochs: 40,
        batch_size: 1,
        max_steps: None,
        decay: LrDecay::Constant,
    };
    train_codec(&codec, &vars, &images, &opt, 1e-6, &mut rng)?;
    let scale = latent_scale(&codec, &images)?;
    let latents = encode_latents(&codec, &images, scale)?;
    let embedder = embedder_info().build()?;
    let examples = records
        .iter()
        .zip(latents)
        .map(|(r, latent)| {
            Ok(Example {
                latent,
                brief: embed_text(&embedder, &r.prompt)?,
                mask: r.mask.to_tensor(DT, &dev)?,
            })
        })
        .collect::<floorgen::Result<Vec<_>>>()?;
    Ok(Corpus {
        codec: snapshot(&vars, "codec")?,
        scale,
        overfit: examples[..8].to_vec(),
        overfit_records: records[..8].to_vec(),
        cond: examples[8..].to_vec(),
        cond_records: records[8..].to_vec(),
        secs: start.elapsed().as_secs_f64(),
    })
}

struct Stage1 {
    base: HashMap<String, Tensor>,
    before: f64,
    after: f64,
    steps: usize,
    secs: f64,
}

/// The desk U-Net overfit on the eight triples.
fn stage1() -> &'static Stage1 {
    static S: OnceLock<Stage1> = OnceLock::new();
    S.get_or_init(|| {
        let c = corpus();
        let start = Instant::now();
        let sched = DESK_SCHEDULE.build().unwrap();
        let vars = VarMap::new();
        let unet = UNet::new(&UNetConfig::desk(), seeded_builder(&vars, 2, DT, &Device::Cpu)).unwrap();
        let before = evaluate_loss(&unet, &c.overfit, &sched, Stage::One, EVAL_DRAWS, EVAL_SEED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let curve = train_stage1(
            &unet,
            &vars,
            &c.overfit,
            &[],
            &sched,
            &overfit_opt(OVERFIT_STEPS),
            &mut rng,
        )
        .unwrap();
        let after = evaluate_loss(&unet, &c.overfit, &sched, Stage::One, EVAL_DRAWS, EVAL_SEED).unwrap();
        let base = strip(snapshot(&vars, "unet").unwrap(), "unet.");
        Stage1 {
            base,
            before,
            after,
            steps: curve.step_count(),
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn strip(m: BTreeMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    m.into_iter().map(|(k, v)| (k[prefix.len()..].to_string(), v)).collect()
}

fn meta(
    stage: Stage,
    steps: usize,
    schedule: ScheduleParams,
    scale: f64,
    base_checksum: Option<String>,
) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage,
        step_count: steps,
        seed: 3,
        config_hash: "acceptance".into(),
        image_size: SIZE,
        schedule,
        codec: CodecConfig::desk(),
        unet: UNetConfig::desk(),
        embedder: embedder_info(),
        latent_scale: scale,
        trained: true,
        base_checksum,
    }
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs()
        .and_then(|t| t.max_all())
        .and_then(|t| t.to_dtype(DType::F64))
        .and_then(|t| t.to_scalar::<f64>())
        .expect("scalar")
}

pub fn zero_init_identity() -> Check {
    let start = Instant::now();
    let dev = Device::Cpu;
    let cfg = UNetConfig::desk();
    let (probes, batch) = (1000usize, 50usize);
    let mut notes = Vec::new();
    for (dtype, tol) in [(DType::F64, 0.0), (DType::F32, 1e-6)] {
        let vars = VarMap::new();
        UNet::new(&cfg, seeded_builder(&vars, 4, dtype, &dev)).map_err(fail)?;
        let fresh: HashMap<String, Tensor> = strip(snapshot(&vars, "u").map_err(fail)?, "u.");
        let base = jitter(&fresh, 5, 0.05).map_err(fail)?;
        let reference = UNet::new(&cfg, VarBuilder::from_tensors(base.clone(), dtype, &dev)).map_err(fail)?;
        let cm = ControlledModel::clone_and_freeze(&base, &cfg, 4, 6, dtype, &dev).map_err(fail)?;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for _ in 0..probes / batch {
            let z = gaussian(&mut rng, &[batch, 4, 8, 8], dtype, &dev).map_err(fail)?;
            let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=8)).collect();
            let text = TextContext::new(
                gaussian(&mut rng, &[batch, 6, cfg.context_dim], dtype, &dev).map_err(fail)?,
                None,
            );
            let bits: Vec<f32> = (0..batch * SIZE * SIZE)
                .map(|_| f32::from(rng.random::<bool>() as u8))
                .collect();
            let mask = Tensor::from_vec(bits, (batch, 1, SIZE, SIZE), &dev)
                .and_then(|t| t.to_dtype(dtype))
                .map_err(fail)?;
            let want = reference.forward(&z, &ts, &text).map_err(fail)?;
            let got = cm
                .predict_eps(&z, &ts, &Conditioning::with_hint(text, mask))
                .map_err(fail)?;
            worst = worst.max(max_abs(&(got - &want).map_err(fail)?));
            scale = scale.max(max_abs(&want));
        }
        if worst > tol || scale < 1e-3 {
            return Err(format!(
                "{dtype:?}: max |controlled - frozen| = {worst:e}, output scale {scale:.3}"
            ));
        }
        notes.push(format!("{dtype:?} max diff {worst:e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        secs < 60.0,
        format!("{probes} probes per precision; {}; {secs:.1}s of 60s", notes.join(", ")),
    )
}

pub fn freeze_contract() -> Check {
    let dev = Device::Cpu;
    let cfg = UNetConfig {
        latent_channels: 4,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![2],
        transformer_depth: 1,
        time_embed_dim: 16,
        context_dim: 8,
        norm_groups: 4,
    };
    let vars = VarMap::new();
    UNet::new(&cfg, seeded_builder(&vars, 1, DT, &dev)).map_err(fail)?;
    let base = jitter(&strip(snapshot(&vars, "u").map_err(fail)?, "u."), 2, 0.05).map_err(fail)?;
    let digest = weights_checksum(&base.clone().into_iter().collect()).map_err(fail)?;
    let cm = ControlledModel::clone_and_freeze(&base, &cfg, 4, 3, DT, &dev).map_err(fail)?;
    let embedder = HashEmbedder::new(0, 64, cfg.context_dim).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let examples = (0..4)
        .map(|i| {
            Ok(Example {
                latent: gaussian(&mut rng, &[1, 4, 4, 4], DT, &dev)?,
                brief: embed_text(&embedder, &format!("plan number {i}"))?,
                mask: Tensor::from_vec(
                    (0..256)
                        .map(|p| f32::from(((p / 16) > i * 2) as u8))
                        .collect::<Vec<_>>(),
                    (1, 1, 16, 16),
                    &dev,
                )?,
            })
        })
        .collect::<floorgen::Result<Vec<_>>>()
        .map_err(fail)?;
    let before = cm.frozen_checksum().map_err(fail)?;
    let control_before = varmap_checksum(cm.vars()).map_err(fail)?;
    let sched = DESK_SCHEDULE.build().map_err(fail)?;
    let curve = train_stage2(&cm, &examples, &[], &sched, &overfit_opt(500), &mut rng).map_err(fail)?;
    let after = cm.frozen_checksum().map_err(fail)?;
    let moved = varmap_checksum(cm.vars()).map_err(fail)? != control_before;
    verdict(
        before == after && after == digest && moved && curve.step_count() == 500,
        format!(
            "{} stage-2 steps; frozen SHA-256 {}… before and after{}; control branch moved: {moved}",
            curve.step_count(),
            &before[..12],
            if before == after { "" } else { " DIFFER" }
        ),
    )
}

pub fn overfit_convergence() -> Check {
    let c = corpus();
    let s1 = stage1();
    let start = Instant::now();
    let sched = DESK_SCHEDULE.build().map_err(fail)?;
    let cm = ControlledModel::clone_and_freeze(&s1.base, &UNetConfig::desk(), 4, 3, DT, &Device::Cpu).map_err(fail)?;
    let before = evaluate_loss(&cm, &c.overfit, &sched, Stage::Two, EVAL_DRAWS, EVAL_SEED).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let curve = train_stage2(&cm, &c.overfit, &[], &sched, &overfit_opt(OVERFIT_STEPS), &mut rng).map_err(fail)?;
    let after = evaluate_loss(&cm, &c.overfit, &sched, Stage::Two, EVAL_DRAWS, EVAL_SEED).map_err(fail)?;
    let s2_secs = start.elapsed().as_secs_f64();
    let params: usize = s1.base.values().map(Tensor::elem_count).sum();
    let (r1, r2) = (s1.after / s1.before, after / before);
    let total = c.secs + s1.secs + s2_secs;
    verdict(
        r1 < 0.1 && r2 < 0.1 && total < 600.0,
        format!(
            "{params}-parameter U-Net, 8 triples; stage 1 {:.4} -> {:.4} (ratio {r1:.3}) in {} steps; stage 2 {before:.4} -> {after:.4} (ratio {r2:.3}) in {} steps; bound 0.1; codec {:.0}s + stage 1 {:.0}s + stage 2 {s2_secs:.0}s = {total:.0}s of 600s",
            s1.before,
            s1.after,
            s1.steps,
            curve.step_count(),
            c.secs,
            s1.secs
        ),
    )
}

const COND_STEPS: usize = 1500;
const COND_SEEDS: usize = 4;

pub fn conditioning_efficacy() -> Check {
    let c = corpus();
    let s1 = stage1();
    let sched = DESK_SCHEDULE.build().map_err(fail)?;
    let cm = ControlledModel::clone_and_freeze(&s1.base, &UNetConfig::desk(), 4, 3, DT, &Device::Cpu).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    train_stage2(&cm, &c.cond, &[], &sched, &overfit_opt(COND_STEPS), &mut rng).map_err(fail)?;
    let unet: BTreeMap<String, Tensor> = s1.base.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut tensors = c.codec.clone();
    tensors.extend(unet.iter().map(|(k, v)| (format!("unet.{k}"), v.clone())));
    tensors.extend(snapshot(cm.vars(), "control").map_err(fail)?);
    let ck = Checkpoint {
        meta: meta(
            Stage::Two,
            COND_STEPS,
            DESK_SCHEDULE,
            c.scale,
            Some(weights_checksum(&unet).map_err(fail)?),
        ),
        tensors,
    };
    let gen = Generator::from_checkpoint(&ck, DT).map_err(fail)?;
    let prompt = &c.cond_records[0].prompt;
    let masks: Vec<_> = c.cond_records.iter().map(|r| r.mask.clone()).collect();
    let mut own_best = 0;
    let mut rows = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let images = gen
            .generate(prompt, Some(m), DESK_SCHEDULE.steps, COND_SEEDS, 0)
            .map_err(fail)?;
        let mut scores = vec![0.0; masks.len()];
        for img in &images {
            let sil = img.silhouette(SILHOUETTE_THRESHOLD);
            for (j, other) in masks.iter().enumerate() {
                scores[j] += iou(&sil, other.pixels()) / images.len() as f64;
            }
        }
        let best = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap_or(0);
        if best == i {
            own_best += 1;
        }
        rows.push(format!(
            "mask {i}: own {:.3}, best other {:.3}",
            scores[i],
            scores
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| *s)
                .fold(0.0, f64::max)
        ));
    }
    verdict(
        own_best >= 3,
        format!(
            "own mask has the highest silhouette IoU in {own_best}/4 (mean of {COND_SEEDS} seeds, {COND_STEPS} stage-2 steps; {})",
            rows.join("; ")
        ),
    )
}

/// The desk network overfit on two triples under a 64-step schedule, so
/// the sampler can run 5 to 50 steps.
const SWEEP_SCHEDULE: ScheduleParams = ScheduleParams {
    steps: 64,
    beta_start: 1e-3,
    beta_end: 0.2,
};
const SWEEP_TRAIN_STEPS: usize = 1500;

pub fn steps_sweep() -> Check {
    let c = corpus();
    let dev = Device::Cpu;
    let sched = SWEEP_SCHEDULE.build().map_err(fail)?;
    let vars = VarMap::new();
    let unet = UNet::new(&UNetConfig::desk(), seeded_builder(&vars, 2, DT, &dev)).map_err(fail)?;
    let train = &c.overfit[..2];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let curve = train_stage1(
        &unet,
        &vars,
        train,
        &[],
        &sched,
        &overfit_opt(SWEEP_TRAIN_STEPS),
        &mut rng,
    )
    .map_err(fail)?;
    let mut tensors = c.codec.clone();
    tensors.extend(snapshot(&vars, "unet").map_err(fail)?);
    let ck = Checkpoint {
        meta: meta(Stage::One, curve.step_count(), SWEEP_SCHEDULE, c.scale, None),
        tensors,
    };
    let gen = Generator::from_checkpoint(&ck, DT).map_err(fail)?;
    let records = &c.overfit_records[..2];
    let steps = [5, 10, 25, 50];
    let a = steps_fidelity_sweep(&gen, records, &steps, 16, 0, None).map_err(fail)?;
    let b = steps_fidelity_sweep(&gen, records, &steps, 16, 0, None).map_err(fail)?;
    let identical = a.to_csv() == b.to_csv() && a.render() == b.render();
    let first = a.rows.first().map(|r| r.median_mse).unwrap_or(f64::NAN);
    let last = a.rows.last().map(|r| r.median_mse).unwrap_or(f64::NAN);
    let medians: Vec<String> = a
        .rows
        .iter()
        .map(|r| format!("{}: {:.5}", r.steps, r.median_mse))
        .collect();
    verdict(
        last <= first && identical,
        format!(
            "median MSE over 2 plans x 16 seeds ({}); 50 <= 5: {}; rerun byte-identical: {identical}",
            medians.join(", "),
            last <= first
        ),
    )
}
