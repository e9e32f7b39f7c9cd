//! Optimization loops for the codec and the two denoiser stages.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlledModel;
use crate::denoiser::{LatentCodec, TextBrief, TextContext};
use crate::diffusion::{
    ddim_timesteps, denoising_mse, forward_diffuse_batch, gaussian, stage1_loss, stage2_loss, Conditioning, Denoiser,
    Loss, NoiseSchedule, Stage,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early once this many optimizer steps have been taken.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub decay: LrDecay,
}

/// Learning-rate schedule over the planned number of optimizer steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at the final step.
    Cosine,
}

impl LrDecay {
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => lr,
            LrDecay::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 429,
            batch_size: 1,
            max_steps: None,
            decay: LrDecay::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean of the minibatch losses seen during the epoch.
    pub train: f64,
    /// Probe loss on the validation split, absent when the split is empty.
    pub val: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochLoss>,
    pub steps: Vec<f64>,
}

impl LossCurve {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// `epoch,train,val` with an empty field for a missing validation value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train,val\n");
        for e in &self.epochs {
            let val = e.val.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train, val));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One training triple in model space.
#[derive(Debug, Clone)]
pub struct Example {
    /// `(1, C, h, w)` scaled latent.
    pub latent: Tensor,
    pub brief: TextBrief,
    /// `(1, 1, H, W)` footprint in {0, 1}.
    pub mask: Tensor,
}

struct Batch {
    z0: Tensor,
    text: TextContext,
    mask: Tensor,
}

fn collate(examples: &[Example], idx: &[usize]) -> Result<Batch> {
    let first = &examples[idx[0]].latent;
    let z0 = Tensor::cat(&idx.iter().map(|&i| &examples[i].latent).collect::<Vec<_>>(), 0)?;
    let mask = Tensor::cat(&idx.iter().map(|&i| &examples[i].mask).collect::<Vec<_>>(), 0)?;
    let briefs: Vec<TextBrief> = idx.iter().map(|&i| examples[i].brief.clone()).collect();
    let text = TextContext::from_briefs(&briefs, first.dtype(), first.device())?;
    Ok(Batch { z0, text, mask })
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn optimizer(vars: &VarMap, cfg: &OptimizerConfig) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(AdamW::new(vars.all_vars(), params)?)
}

/// Shared epoch loop. `step` computes a differentiable loss for one batch.
fn run<F, V>(
    vars: &VarMap,
    n_train: usize,
    cfg: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
    mut step: F,
    mut validate: V,
) -> Result<LossCurve>
where
    F: FnMut(&[usize], &mut ChaCha8Rng) -> Result<Tensor>,
    V: FnMut() -> Result<Option<f64>>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::validation("dataset", "no training examples"));
    }
    let mut opt = optimizer(vars, cfg)?;
    let mut curve = LossCurve::default();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let planned = (cfg.epochs * n_train.div_ceil(cfg.batch_size)).min(limit);
    for epoch in 0..cfg.epochs {
        if curve.steps.len() >= limit {
            break;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in shuffled_batches(n_train, cfg.batch_size, rng) {
            if curve.steps.len() >= limit {
                break;
            }
            opt.set_learning_rate(cfg.decay.rate(cfg.lr, curve.steps.len(), planned));
            let loss = step(&idx, rng)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Generation(format!(
                    "loss diverged at step {}",
                    curve.steps.len()
                )));
            }
            opt.backward_step(&loss)?;
            curve.steps.push(value);
            sum += value;
            count += 1;
        }
        curve.epochs.push(EpochLoss {
            epoch,
            train: sum / count.max(1) as f64,
            val: validate()?,
        });
        log::debug!(
            "epoch {epoch}: train {:.5}",
            curve.epochs.last().map(|e| e.train).unwrap_or_default()
        );
    }
    Ok(curve)
}

/// Fits the codec with an L1 reconstruction term plus `kl_weight`·KL.
pub fn train_codec(
    codec: &LatentCodec,
    vars: &VarMap,
    images: &[Tensor],
    cfg: &OptimizerConfig,
    kl_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossCurve> {
    run(
        vars,
        images.len(),
        cfg,
        rng,
        |idx, rng| {
            let x = Tensor::cat(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>(), 0)?;
            codec.training_loss(&x, kl_weight, rng)
        },
        || Ok(None),
    )
}

/// Reciprocal standard deviation of the posterior means over `images`, so that
/// scaled latents have roughly unit variance.
pub fn latent_scale(codec: &LatentCodec, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("images", "empty"));
    }
    let mut values = Vec::new();
    for x in images {
        let (mu, _) = codec.posterior(x)?;
        values.extend(mu.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 })
}

/// Deterministic estimate of the expected denoising loss: for every example,
/// `draws` noise draws at each of up to 16 evenly strided timesteps.
pub fn evaluate_loss<M: Denoiser>(
    model: &M,
    examples: &[Example],
    schedule: &NoiseSchedule,
    stage: Stage,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::validation("examples", "empty"));
    }
    let ts = ddim_timesteps(schedule.steps(), schedule.steps().min(16))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in examples {
        let z0 = ex.latent.repeat((ts.len(), 1, 1, 1))?;
        let text = TextContext::from_briefs(&vec![ex.brief.clone(); ts.len()], z0.dtype(), z0.device())?;
        let cond = match stage {
            Stage::One => Conditioning::text(text),
            Stage::Two => Conditioning::with_hint(text, ex.mask.repeat((ts.len(), 1, 1, 1))?),
        };
        for _ in 0..draws.max(1) {
            let eps = gaussian(&mut rng, z0.dims(), z0.dtype(), z0.device())?;
            let z_t = forward_diffuse_batch(&z0, &ts, &eps, schedule)?;
            let pred = model.predict_eps(&z_t, &ts, &cond)?;
            total += scalar(&denoising_mse(&eps, &pred)?)?;
        }
    }
    Ok(total / (examples.len() * draws.max(1)) as f64)
}

const PROBE_DRAWS: usize = 2;
const PROBE_SEED: u64 = 0x5eed;

/// Trains the text-conditioned denoiser whose parameters live in `vars`.
pub fn train_stage1<M: Denoiser>(
    model: &M,
    vars: &VarMap,
    train: &[Example],
    val: &[Example],
    schedule: &NoiseSchedule,
    cfg: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossCurve> {
    run(
        vars,
        train.len(),
        cfg,
        rng,
        |idx, rng| {
            let b = collate(train, idx)?;
            let Loss { tensor, .. } = stage1_loss(model, &b.z0, &b.text, schedule, rng)?;
            Ok(tensor)
        },
        || {
            if val.is_empty() {
                Ok(None)
            } else {
                evaluate_loss(model, val, schedule, Stage::One, PROBE_DRAWS, PROBE_SEED).map(Some)
            }
        },
    )
}

/// Trains the control branch; the frozen stage-1 weights are not variables and
/// cannot move.
pub fn train_stage2(
    model: &ControlledModel,
    train: &[Example],
    val: &[Example],
    schedule: &NoiseSchedule,
    cfg: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossCurve> {
    run(
        model.vars(),
        train.len(),
        cfg,
        rng,
        |idx, rng| {
            let b = collate(train, idx)?;
            let Loss { tensor, .. } = stage2_loss(model, &b.z0, &b.text, &b.mask, schedule, rng)?;
            Ok(tensor)
        },
        || {
            if val.is_empty() {
                Ok(None)
            } else {
                evaluate_loss(model, val, schedule, Stage::Two, PROBE_DRAWS, PROBE_SEED).map(Some)
            }
        },
    )
}

/// Encodes images to scaled posterior means on `device`.
pub fn encode_latents(codec: &LatentCodec, images: &[Tensor], scale: f64) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|x| {
            let (mu, _) = codec.posterior(x)?;
            Ok(mu.affine(scale, 0.0)?.detach())
        })
        .collect()
}
