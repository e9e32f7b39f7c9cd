use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::Generator;
use crate::data::LoadedRecord;
use crate::error::{Error, Result};
use crate::metrics::{mse, ssim, SsimParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub mean_mse: f64,
    /// Median over every (example, seed) pair.
    pub median_mse: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub examples: Vec<String>,
    pub seeds: usize,
    pub base_seed: u64,
    pub total_steps: usize,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("steps,mean_mse,median_mse,mean_ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.steps, r.mean_mse, r.median_mse, r.mean_ssim
            ));
        }
        out
    }

    /// Plain-text table of fidelity against denoising steps.
    pub fn render(&self) -> String {
        let mut out = format!(
            "denoising steps vs reconstruction ({} examples x {} seeds, T = {})\n",
            self.examples.len(),
            self.seeds,
            self.total_steps
        );
        out.push_str("| steps | mean MSE | median MSE | mean SSIM |\n");
        out.push_str("|-------|----------|------------|-----------|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {:>5} | {:>8.5} | {:>10.5} | {:>9.4} |\n",
                r.steps, r.mean_mse, r.median_mse, r.mean_ssim
            ));
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// For each step count, samples every example under `seeds` seeds and scores
/// the 8-bit outputs against the example's plan. The same seeds are reused
/// across step counts. With `dump` set, every sample is written as
/// `steps{s}_{id}_seed{k}.png`.
pub fn steps_fidelity_sweep(
    generator: &Generator,
    eval_set: &[LoadedRecord],
    step_list: &[usize],
    seeds: usize,
    base_seed: u64,
    dump: Option<&Path>,
) -> Result<SweepReport> {
    if eval_set.is_empty() {
        return Err(Error::validation("eval_set", "empty"));
    }
    if step_list.is_empty() {
        return Err(Error::validation("steps", "empty step list"));
    }
    if seeds == 0 {
        return Err(Error::validation("seeds", "must be at least 1"));
    }
    let total = generator.max_steps();
    if let Some(s) = step_list.iter().find(|&&s| s < 1 || s > total) {
        return Err(Error::validation("steps", format!("{s} outside 1..={total}")));
    }
    let params = SsimParams::default();
    let conds = eval_set
        .iter()
        .map(|r| generator.condition(&r.prompt, Some(&r.mask)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(step_list.len());
    for &steps in step_list {
        let mut errors = Vec::new();
        let mut sims = Vec::new();
        for (rec, cond) in eval_set.iter().zip(&conds) {
            for k in 0..seeds {
                let z = generator.sample_latent(cond, steps, base_seed.wrapping_add(k as u64))?;
                let img = generator.decode(&z)?.quantized();
                if let Some(dir) = dump {
                    img.save_png(&dir.join(format!("steps{steps}_{}_seed{k}.png", rec.id)))?;
                }
                errors.push(mse(&img, &rec.plan)?);
                sims.push(ssim(&img, &rec.plan, &params)?);
            }
        }
        let n = errors.len() as f64;
        rows.push(SweepRow {
            steps,
            mean_mse: errors.iter().sum::<f64>() / n,
            median_mse: median(errors),
            mean_ssim: sims.iter().sum::<f64>() / n,
        });
    }
    Ok(SweepReport {
        rows,
        examples: eval_set.iter().map(|r| r.id.clone()).collect(),
        seeds,
        base_seed,
        total_steps: total,
    })
}
