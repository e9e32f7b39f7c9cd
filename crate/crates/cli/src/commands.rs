use std::fmt;
use std::path::{Path, PathBuf};

use floorgen::analytics::{export_projection, pca_fit};
use floorgen::control::FootprintMask;
use floorgen::data::{
    build_dataset, prompt_from_spec, BuildingSpec, BuildingType, DatasetOptions, LoadedRecord, Manifest, Split,
    MANIFEST_FILE,
};
use floorgen::grid::tile_row;
use floorgen::metrics::{render_metric_table, RandomConvExtractor};
use floorgen::pipeline::{
    derive_seed, embedding_grid, evaluate_records, generator_embeddings, load_split, run_stage1, run_stage2,
    steps_fidelity_sweep, Generator, RunConfig, RunRecorder, STAGE1_FILE, STAGE2_FILE,
};
use floorgen_service::{prepare_mask, AppState, ServiceConfig};
use sha2::{Digest, Sha256};

use crate::SplitArg;

#[derive(Debug)]
pub enum CliError {
    /// Bad config, arguments or missing prerequisites; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<floorgen::Error> for CliError {
    fn from(e: floorgen::Error) -> Self {
        match e {
            floorgen::Error::Validation { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn recorder(cfg: &RunConfig, command: &str) -> Result<RunRecorder> {
    Ok(RunRecorder::new(&cfg.output, command, &cfg.hash()?, cfg.seed))
}

/// Stores the resolved config next to the run manifest and writes both. The
/// stored copy leaves `output` empty: it is the directory holding `runs/`.
fn finish(cfg: &RunConfig, mut rec: RunRecorder, name: &str) -> Result<PathBuf> {
    let mut stored = cfg.clone();
    stored.output = PathBuf::new();
    let text = serde_json::to_string_pretty(&stored).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    rec.write(
        &cfg.output.join("runs").join(format!("{name}.config.json")),
        text.as_bytes(),
    )?;
    let (path, _) = rec.finish(name)?;
    println!("run manifest: {}", path.display());
    Ok(path)
}

fn manifest(cfg: &RunConfig) -> Result<Manifest> {
    let dir = cfg.dataset_dir();
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Config(format!(
            "no dataset at {}; run `floorgen dataset` first",
            dir.display()
        )));
    }
    Ok(Manifest::load(&dir)?)
}

fn records(cfg: &RunConfig, split: SplitArg, limit: Option<usize>) -> Result<Vec<LoadedRecord>> {
    let m = manifest(cfg)?;
    let mut out = match split {
        SplitArg::Train => load_split(&m, Split::Train, cfg.image_size)?,
        SplitArg::Val => load_split(&m, Split::Val, cfg.image_size)?,
        SplitArg::All => {
            let mut v = load_split(&m, Split::Train, cfg.image_size)?;
            v.extend(load_split(&m, Split::Val, cfg.image_size)?);
            v
        }
    };
    if let Some(l) = limit {
        out.truncate(l);
    }
    Ok(out)
}

/// The explicit checkpoint, else stage 2, else stage 1 under the output dir.
fn checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        if !p.is_file() {
            return Err(CliError::Config(format!("checkpoint {} does not exist", p.display())));
        }
        return Ok(p);
    }
    for rel in [STAGE2_FILE, STAGE1_FILE] {
        let p = cfg.output.join(rel);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(CliError::Config(format!(
        "no checkpoint under {}; run `floorgen train --stage 1` first",
        cfg.output.display()
    )))
}

fn generator(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<Generator> {
    let path = checkpoint(cfg, explicit)?;
    log::info!("loading {}", path.display());
    Ok(Generator::load(&path, cfg.dtype())?)
}

fn steps_or_t(g: &Generator, steps: Option<usize>) -> Result<usize> {
    let t = g.max_steps();
    let s = steps.unwrap_or(t);
    if s == 0 || s > t {
        return Err(CliError::Config(format!("--steps must be in 1..={t}, got {s}")));
    }
    Ok(s)
}

pub fn config(cfg: &RunConfig, write: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{text}");
    if let Some(p) = write {
        cfg.save(p)?;
    }
    Ok(())
}

pub fn dataset(mut cfg: RunConfig, n: Option<usize>, hires: bool) -> Result<()> {
    if let Some(n) = n {
        cfg.dataset.n = n;
    }
    cfg.dataset.hires |= hires;
    cfg.validate()?;
    let mut rec = recorder(&cfg, "dataset")?;
    rec.phase("render");
    let dir = cfg.dataset_dir();
    let opts = DatasetOptions {
        n: cfg.dataset.n,
        seed: derive_seed(cfg.seed, "dataset"),
        image_size: cfg.image_size,
        hires: cfg.dataset.hires,
        ..DatasetOptions::default()
    };
    let (m, summary) = build_dataset(&dir, &opts)?;
    rec.phase("checksum");
    rec.record(&m.path())?;
    rec.record(&dir.join(floorgen::data::SUMMARY_FILE))?;
    for r in &m.records {
        rec.record(&dir.join(&r.mask_path))?;
        rec.record(&dir.join(&r.plan_path))?;
        if cfg.dataset.hires {
            rec.record(&dir.join(format!("hires/{}_plan.png", r.id)))?;
        }
    }
    println!(
        "{} records ({} train, {} val) in {}",
        summary.n,
        summary.train,
        summary.val,
        dir.display()
    );
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    finish(&cfg, rec, "dataset")?;
    Ok(())
}

pub fn train_stage1(cfg: &RunConfig) -> Result<()> {
    manifest(cfg)?;
    let mut rec = recorder(cfg, "train-stage1")?;
    let out = run_stage1(cfg, &mut rec)?;
    if let Some(c) = &out.codec_curve {
        if let Some(last) = c.epochs.last() {
            println!("codec: final epoch loss {:.6}", last.train);
        }
    }
    if let Some(last) = out.curve.epochs.last() {
        println!(
            "stage 1: {} steps, final epoch loss {:.6}",
            out.curve.step_count(),
            last.train
        );
    }
    println!("checkpoint: {}", out.checkpoint.display());
    finish(cfg, rec, "train-stage1")?;
    Ok(())
}

pub fn train_stage2(cfg: &RunConfig, from: Option<PathBuf>) -> Result<()> {
    let stage1 = from.unwrap_or_else(|| cfg.output.join(STAGE1_FILE));
    if !stage1.is_file() {
        return Err(CliError::Config(format!(
            "stage 2 trains on top of a stage-1 checkpoint, but {} does not exist; run `floorgen train --stage 1` first",
            stage1.display()
        )));
    }
    manifest(cfg)?;
    let mut rec = recorder(cfg, "train-stage2")?;
    let out = run_stage2(cfg, &stage1, &mut rec)?;
    if let Some(last) = out.curve.epochs.last() {
        println!(
            "stage 2: {} steps, final epoch loss {:.6}",
            out.curve.step_count(),
            last.train
        );
    }
    println!("checkpoint: {}", out.checkpoint.display());
    finish(cfg, rec, "train-stage2")?;
    Ok(())
}

pub fn sample(
    cfg: &RunConfig,
    prompt: &str,
    mask: Option<&Path>,
    steps: Option<usize>,
    n: usize,
    explicit: Option<PathBuf>,
) -> Result<()> {
    if !(1..=floorgen_service::MAX_GENERATE).contains(&n) {
        return Err(CliError::Config(format!(
            "--n must be in 1..={}",
            floorgen_service::MAX_GENERATE
        )));
    }
    let g = generator(cfg, explicit)?;
    let steps = steps_or_t(&g, steps)?;
    let mut warnings = Vec::new();
    let (footprint, mask_bytes) = match mask {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let m = prepare_mask(&bytes, g.image_size(), &mut warnings).map_err(|e| CliError::Config(e.to_string()))?;
            (Some(m), bytes)
        }
        None => (None, Vec::new()),
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut h = Sha256::new();
    for part in [
        prompt.as_bytes(),
        &mask_bytes,
        &steps.to_le_bytes(),
        &n.to_le_bytes(),
        &cfg.seed.to_le_bytes(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let tag = hex::encode(&h.finalize()[..6]);
    let name = format!("sample-{tag}");
    let mut rec = recorder(cfg, &name)?;
    rec.phase("generate");
    let images = g.generate(prompt, footprint.as_ref(), steps, n, cfg.seed)?;
    rec.phase("write");
    let dir = cfg.output.join("samples").join(&tag);
    for (i, img) in images.iter().enumerate() {
        rec.write(&dir.join(format!("sample_{i}.png")), &img.encode_png()?)?;
    }
    rec.write(&dir.join("grid.png"), &tile_row(&images)?.encode_png()?)?;
    let request = serde_json::json!({
        "prompt": prompt,
        "steps": steps,
        "n": n,
        "seed": cfg.seed,
        "mask_sha256": hex::encode(Sha256::digest(&mask_bytes)),
        "warnings": warnings,
    });
    rec.write(&dir.join("request.json"), format!("{request:#}\n").as_bytes())?;
    println!("{n} images in {}", dir.display());
    finish(cfg, rec, &name)?;
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    steps: Option<usize>,
    split: SplitArg,
    limit: Option<usize>,
    extractor_seed: u64,
    explicit: Option<PathBuf>,
) -> Result<()> {
    let g = generator(cfg, explicit)?;
    let steps = steps_or_t(&g, steps)?;
    let recs = records(cfg, split, limit)?;
    let mut rec = recorder(cfg, "eval")?;
    rec.phase("generate");
    let extractor = RandomConvExtractor::new(extractor_seed);
    let (report, generated) = evaluate_records(&g, &recs, steps, derive_seed(cfg.seed, "eval"), &extractor)?;
    rec.phase("write");
    let dir = cfg.output.join("eval");
    for (r, img) in recs.iter().zip(&generated) {
        rec.write(&dir.join("real").join(format!("{}.png", r.id)), &r.plan.encode_png()?)?;
        rec.write(&dir.join("generated").join(format!("{}.png", r.id)), &img.encode_png()?)?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    rec.write(&dir.join("report.json"), json.as_bytes())?;
    let table = render_metric_table(&[("ours", &report)]);
    rec.write(&dir.join("table.txt"), table.as_bytes())?;
    print!("{table}");
    finish(cfg, rec, "eval")?;
    Ok(())
}

/// One brief per building type, labelled by the type.
fn type_briefs() -> Vec<(String, String)> {
    BuildingType::ALL
        .iter()
        .map(|t| (t.as_str().to_string(), prompt_from_spec(&BuildingSpec::sample(*t, 0))))
        .collect()
}

pub fn embed(cfg: &RunConfig, n: usize, steps: Option<usize>, explicit: Option<PathBuf>) -> Result<()> {
    let g = generator(cfg, explicit)?;
    let steps = steps_or_t(&g, steps)?;
    let masks: Vec<FootprintMask> = records(cfg, SplitArg::All, None)?.into_iter().map(|r| r.mask).collect();
    let mut rec = recorder(cfg, "embed")?;
    rec.phase("embed");
    let queries = embedding_grid(&g, &type_briefs(), &masks, n)?;
    let set = generator_embeddings(&g, &queries, steps, derive_seed(cfg.seed, "embed"))?;
    rec.phase("pca");
    let model = pca_fit(&set.vectors, 2.min(set.dim()))?;
    let dir = cfg.output.join("analytics");
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join("pca.csv");
    let info = export_projection(&model, &set, &csv)?;
    rec.record(&csv)?;
    rec.record(&csv.with_extension("json"))?;
    let raw = serde_json::to_string(&set).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    rec.write(&dir.join("embeddings.json"), raw.as_bytes())?;
    println!(
        "{} embeddings of width {}; explained variance ratio pc1 {:.4}, pc2 {:.4}",
        info.n, info.d, info.explained_ratio[0], info.explained_ratio[1]
    );
    println!("projection: {}", csv.display());
    finish(cfg, rec, "embed")?;
    Ok(())
}

pub fn sweep(
    cfg: &RunConfig,
    steps: &[usize],
    seeds: usize,
    split: SplitArg,
    limit: Option<usize>,
    dump: bool,
    explicit: Option<PathBuf>,
) -> Result<()> {
    let g = generator(cfg, explicit)?;
    for s in steps {
        steps_or_t(&g, Some(*s))?;
    }
    let recs = records(cfg, split, limit)?;
    let dir = cfg.output.join("sweep");
    let dump_dir = dir.join("samples");
    if dump {
        std::fs::create_dir_all(&dump_dir)?;
    }
    let mut rec = recorder(cfg, "sweep")?;
    rec.phase("sample");
    let report = steps_fidelity_sweep(
        &g,
        &recs,
        steps,
        seeds,
        derive_seed(cfg.seed, "sweep"),
        dump.then_some(dump_dir.as_path()),
    )?;
    rec.phase("write");
    if dump {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dump_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for f in files {
            rec.record(&f)?;
        }
    }
    rec.write(&dir.join("sweep.csv"), report.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    rec.write(&dir.join("sweep.json"), json.as_bytes())?;
    let text = report.render();
    rec.write(&dir.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    finish(cfg, rec, "sweep")?;
    Ok(())
}

pub fn serve(
    cfg: &RunConfig,
    addr: std::net::SocketAddr,
    real: Option<PathBuf>,
    generated: Option<PathBuf>,
    log_path: Option<PathBuf>,
    explicit: Option<PathBuf>,
) -> Result<()> {
    let real = real.unwrap_or_else(|| cfg.output.join("eval/real"));
    let generated = generated.unwrap_or_else(|| cfg.output.join("eval/generated"));
    for d in [&real, &generated] {
        if !d.is_dir() {
            return Err(CliError::Config(format!(
                "image pool {} does not exist; run `floorgen eval` or pass --real/--generated",
                d.display()
            )));
        }
    }
    let g = match checkpoint(cfg, explicit.clone()) {
        Ok(p) => Some(Generator::load(&p, cfg.dtype())?),
        Err(e) if explicit.is_none() => {
            log::warn!("generation disabled: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    let mut sc = ServiceConfig::new(
        real,
        generated,
        log_path.unwrap_or_else(|| cfg.output.join("service/events.jsonl")),
    );
    sc.seed = derive_seed(cfg.seed, "service");
    let state = AppState::new(sc, g)?;
    let rt = tokio::runtime::Runtime::new()?;
    println!("serving on http://{addr}");
    rt.block_on(floorgen_service::serve(state, addr))?;
    Ok(())
}
