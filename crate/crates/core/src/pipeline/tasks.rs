use crate::analytics::{collect_embeddings, EmbedOptions, EmbeddingQuery, EmbeddingSet};
use crate::control::FootprintMask;
use crate::data::LoadedRecord;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::{evaluate, FeatureExtractor, MetricReport, SsimParams};

use super::generator::Generator;

/// One generated plan per record, conditioned on its own brief and footprint;
/// record `i` uses seed `seed + i`.
pub fn generate_for_records(
    generator: &Generator,
    records: &[LoadedRecord],
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = generator.generate(&r.prompt, Some(&r.mask), steps, 1, seed.wrapping_add(i as u64))?;
            Ok(out.remove(0))
        })
        .collect()
}

/// Scores generated plans against the records' own plans.
pub fn evaluate_records(
    generator: &Generator,
    records: &[LoadedRecord],
    steps: usize,
    seed: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<(MetricReport, Vec<ImageGrid>)> {
    if records.len() < 2 {
        return Err(Error::validation("eval set", "need at least two records"));
    }
    let generated = generate_for_records(generator, records, steps, seed)?;
    let real: Vec<ImageGrid> = records.iter().map(|r| r.plan.clone()).collect();
    let report = evaluate(&real, &generated, extractor, &SsimParams::default())?;
    Ok((report, generated))
}

/// Cycles through every (brief, footprint) pair until `n` queries exist.
/// Labels are the brief labels.
pub fn embedding_grid(
    generator: &Generator,
    briefs: &[(String, String)],
    masks: &[FootprintMask],
    n: usize,
) -> Result<Vec<EmbeddingQuery>> {
    if briefs.is_empty() || masks.is_empty() {
        return Err(Error::validation("grid", "need at least one brief and one mask"));
    }
    if n < 2 {
        return Err(Error::validation("n", "need at least two embeddings"));
    }
    (0..n)
        .map(|i| {
            let (label, prompt) = &briefs[i % briefs.len()];
            let mask = &masks[(i / briefs.len()) % masks.len()];
            Ok(EmbeddingQuery {
                id: format!("{i:05}"),
                label: label.clone(),
                cond: generator.condition(prompt, Some(mask))?,
            })
        })
        .collect()
}

pub fn generator_embeddings(
    generator: &Generator,
    queries: &[EmbeddingQuery],
    steps: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    if !generator.meta.trained {
        log::warn!("collecting embeddings from an untrained checkpoint");
    }
    let opts = EmbedOptions {
        latent: generator.latent_shape(),
        steps,
        seed,
        dtype: generator.dtype,
    };
    collect_embeddings(&generator.model, queries, &generator.schedule, &opts, &generator.device)
}
