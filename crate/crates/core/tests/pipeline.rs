use std::path::Path;

use floorgen::analytics::pca_fit;
use floorgen::checkpoint::Checkpoint;
use floorgen::data::{build_dataset, DatasetOptions, Manifest, Split};
use floorgen::metrics::RandomConvExtractor;
use floorgen::pipeline::*;

fn tiny_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.output = out.to_path_buf();
    c.dataset.n = 12;
    c.unet.base_channels = 8;
    c.unet.norm_groups = 4;
    c.codec.base_channels = 8;
    for o in [&mut c.stage1, &mut c.stage2, &mut c.codec_training.optimizer] {
        o.epochs = 1;
        o.max_steps = Some(4);
    }
    c
}

fn build(cfg: &RunConfig) -> Manifest {
    let opts = DatasetOptions {
        n: cfg.dataset.n,
        seed: cfg.seed,
        image_size: cfg.image_size,
        ..DatasetOptions::default()
    };
    build_dataset(&cfg.dataset_dir(), &opts).unwrap().0
}

#[test]
fn two_stage_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    cfg.validate().unwrap();
    let manifest = build(&cfg);
    let hash = cfg.hash().unwrap();

    let mut rec = RunRecorder::new(&cfg.output, "train-stage1", &hash, cfg.seed);
    let s1 = run_stage1(&cfg, &mut rec).unwrap();
    assert_eq!(s1.curve.step_count(), 4);
    let (_, m1) = rec.finish("train-stage1").unwrap();
    assert!(m1.artifacts.iter().any(|a| a.path == STAGE1_FILE));
    let bytes = std::fs::read(&s1.checkpoint).unwrap();
    let entry = m1.artifacts.iter().find(|a| a.path == STAGE1_FILE).unwrap();
    assert_eq!(entry.git_sha1, git_blob_sha1(&bytes));

    let mut rec = RunRecorder::new(&cfg.output, "train-stage2", &hash, cfg.seed);
    let s2 = run_stage2(&cfg, &s1.checkpoint, &mut rec).unwrap();
    rec.finish("train-stage2").unwrap();

    let ck1 = Checkpoint::load(&s1.checkpoint, &candle_core::Device::Cpu).unwrap();
    let ck2 = Checkpoint::load(&s2.checkpoint, &candle_core::Device::Cpu).unwrap();
    assert_eq!(
        ck2.meta.base_checksum.as_deref(),
        Some(ck1.section_checksum("unet").unwrap().as_str())
    );
    assert_eq!(
        ck2.section_checksum("unet").unwrap(),
        ck1.section_checksum("unet").unwrap()
    );
    assert_eq!(
        ck2.section_checksum("codec").unwrap(),
        ck1.section_checksum("codec").unwrap()
    );

    let g = Generator::load(&s2.checkpoint, cfg.dtype()).unwrap();
    assert!(g.is_controlled());
    let val = load_split(&manifest, Split::Val, cfg.image_size).unwrap();
    let train = load_split(&manifest, Split::Train, cfg.image_size).unwrap();
    let a = g.generate(&val[0].prompt, Some(&val[0].mask), 4, 2, 9).unwrap();
    let b = g.generate(&val[0].prompt, Some(&val[0].mask), 4, 2, 9).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].encode_png().unwrap(), b[0].encode_png().unwrap());
    // tile i is reproducible alone
    let single = g.generate(&val[0].prompt, Some(&val[0].mask), 4, 1, 10).unwrap();
    assert_eq!(single[0], a[1]);
    assert!(g.generate(&val[0].prompt, None, 4, 1, 0).is_err());
    assert!(g.generate(&val[0].prompt, Some(&val[0].mask), 9, 1, 0).is_err());

    // sweep: deterministic, one row per step count, values recomputable from dumps
    let dump = dir.path().join("dump");
    std::fs::create_dir_all(&dump).unwrap();
    let r1 = steps_fidelity_sweep(&g, &train[..2], &[1, 4, 8], 2, 3, Some(&dump)).unwrap();
    let r2 = steps_fidelity_sweep(&g, &train[..2], &[1, 4, 8], 2, 3, None).unwrap();
    assert_eq!(r1.rows.len(), 3);
    assert_eq!(r1.to_csv(), r2.to_csv());
    let mut errs = Vec::new();
    for rec in &train[..2] {
        for k in 0..2 {
            let img = floorgen::ImageGrid::load_png(&dump.join(format!("steps4_{}_seed{k}.png", rec.id))).unwrap();
            errs.push(floorgen::metrics::mse(&img, &rec.plan).unwrap());
        }
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!((mean - r1.rows[1].mean_mse).abs() < 1e-12);
    assert!(steps_fidelity_sweep(&g, &[], &[1], 1, 0, None).is_err());
    assert!(steps_fidelity_sweep(&g, &train[..1], &[0], 1, 0, None).is_err());

    // evaluation
    let (report, gen) = evaluate_records(&g, &train[..3], 2, 1, &RandomConvExtractor::new(0)).unwrap();
    assert_eq!(gen.len(), 3);
    assert_eq!(report.n_real, 3);
    assert!(report.fid.is_finite());

    // embeddings are deterministic and labelled by brief
    let briefs: Vec<(String, String)> = train
        .iter()
        .take(3)
        .map(|r| (r.building_type.to_string(), r.prompt.clone()))
        .collect();
    let masks: Vec<_> = train.iter().take(2).map(|r| r.mask.clone()).collect();
    let q = embedding_grid(&g, &briefs, &masks, 6).unwrap();
    let e1 = generator_embeddings(&g, &q, 2, 5).unwrap();
    let e2 = generator_embeddings(&g, &q, 2, 5).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.len(), 6);
    assert_eq!(
        e1.dim(),
        cfg.unet.base_channels * cfg.unet.channel_mults.last().unwrap()
    );
    let pca = pca_fit(&e1.vectors, 2).unwrap();
    assert_eq!(pca.k(), 2);
}

#[test]
fn stage1_generator_ignores_mask_and_needs_no_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = build(&cfg);
    let mut rec = RunRecorder::new(&cfg.output, "train-stage1", "x", cfg.seed);
    let s1 = run_stage1(&cfg, &mut rec).unwrap();
    let g = Generator::load(&s1.checkpoint, cfg.dtype()).unwrap();
    assert!(!g.is_controlled());
    let recs = load_split(&manifest, Split::Train, cfg.image_size).unwrap();
    let a = g.generate(&recs[0].prompt, None, 2, 1, 0).unwrap();
    let b = g.generate(&recs[0].prompt, Some(&recs[0].mask), 2, 1, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stage2_rejects_a_stage2_checkpoint_as_base() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    build(&cfg);
    let mut rec = RunRecorder::new(&cfg.output, "t", "x", cfg.seed);
    let s1 = run_stage1(&cfg, &mut rec).unwrap();
    let s2 = run_stage2(&cfg, &s1.checkpoint, &mut rec).unwrap();
    assert!(run_stage2(&cfg, &s2.checkpoint, &mut rec).is_err());
}

#[test]
fn identical_config_gives_identical_losses_and_dataset_manifest() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.precision = Precision::F64;
        let m = build(&cfg);
        let mut rec = RunRecorder::new(&cfg.output, "t", "x", cfg.seed);
        let s1 = run_stage1(&cfg, &mut rec).unwrap();
        let manifest_bytes = std::fs::read(m.path()).unwrap();
        (s1.curve, manifest_bytes, dir)
    };
    let (c1, m1, _d1) = run();
    let (c2, m2, _d2) = run();
    assert_eq!(c1, c2);
    assert_eq!(m1, m2);
}
