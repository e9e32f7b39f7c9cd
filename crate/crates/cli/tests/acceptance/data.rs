use floorgen::data::{build_dataset, generate_sample, BuildingSpec, BuildingType, DatasetOptions, Manifest};
use floorgen::grid::SILHOUETTE_THRESHOLD;

use crate::{fail, verdict, Check};

pub fn dataset() -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let (manifest, summary) = build_dataset(dir.path(), &DatasetOptions::default()).map_err(fail)?;
    let reloaded = Manifest::load(dir.path()).map_err(fail)?;
    if manifest.records.len() != 500 || summary.n != 500 || reloaded.records.len() != 500 {
        return Err(format!("default build holds {} records", manifest.records.len()));
    }

    let mut outside = 0usize;
    let mut nondeterministic = Vec::new();
    for seed in 0..100u64 {
        let spec = BuildingSpec::sample(BuildingType::ALL[seed as usize % 8], seed);
        let a = generate_sample(&spec, 64).map_err(fail)?;
        let sil = a.plan.silhouette(SILHOUETTE_THRESHOLD);
        outside += sil.iter().zip(a.mask.pixels()).filter(|(p, m)| **p && !**m).count();
        let b = generate_sample(&spec, 64).map_err(fail)?;
        let same = a.plan.encode_png().map_err(fail)? == b.plan.encode_png().map_err(fail)?
            && a.mask.to_grid().encode_png().map_err(fail)? == b.mask.to_grid().encode_png().map_err(fail)?;
        if !same {
            nondeterministic.push(seed);
        }
    }
    verdict(
        outside == 0 && nondeterministic.is_empty(),
        format!(
            "500 records ({} train / {} val); plan pixels outside the mask over 100 seeds: {outside}; seeds with differing bytes: {nondeterministic:?}",
            summary.train, summary.val
        ),
    )
}
