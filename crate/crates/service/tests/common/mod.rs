#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use floorgen::data::{build_dataset, DatasetOptions, Manifest, Split};
use floorgen::pipeline::{load_split, run_stage1, run_stage2, RunConfig, RunRecorder};
use floorgen::ImageGrid;
use floorgen_service::{AppState, ServiceConfig};
use tower::ServiceExt;

pub struct Resp {
    pub status: StatusCode,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Resp {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn call(app: &Router, req: Request<Body>) -> Resp {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp
        .headers()
        .iter()
        .map(|(k, v)| (k.to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap()
        .to_vec();
    Resp { status, headers, body }
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn post_json(uri: &str, v: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

pub enum Part<'a> {
    Text(&'a str, String),
    File(&'a str, Vec<u8>),
}

pub fn multipart(uri: &str, parts: &[Part]) -> Request<Body> {
    let boundary = "floorgen-test-boundary";
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match p {
            Part::Text(name, v) => {
                body.extend_from_slice(format!("content-disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
                body.extend_from_slice(v.as_bytes());
            }
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!(
                        "content-disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\ncontent-type: image/png\r\n\r\n"
                    )
                    .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

/// Writes `n` distinct PNGs into `dir`.
pub fn write_pool(dir: &Path, n: usize, tag: u8) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = ImageGrid::from_fn(8, 8, 3, |y, x, c| {
            ((y * 8 + x + c * 3 + i * 5 + tag as usize * 11) % 17) as f32 / 16.0
        });
        img.save_png(&dir.join(format!("{i:03}.png"))).unwrap();
    }
}

pub fn pools(root: &Path, real: usize, generated: usize) -> ServiceConfig {
    write_pool(&root.join("real"), real, 0);
    write_pool(&root.join("generated"), generated, 1);
    let mut c = ServiceConfig::new(root.join("real"), root.join("generated"), root.join("ratings.jsonl"));
    c.seed = 7;
    c
}

pub fn state(cfg: &ServiceConfig) -> AppState {
    AppState::new(cfg.clone(), None).unwrap()
}

pub struct Trained {
    pub dir: PathBuf,
    pub stage2: PathBuf,
    pub config: RunConfig,
    pub manifest: Manifest,
}

/// A small stage-2 checkpoint built once per test binary.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let mut c = RunConfig::desk();
        c.output = dir.clone();
        c.dataset.n = 12;
        c.unet.base_channels = 8;
        c.unet.norm_groups = 4;
        c.codec.base_channels = 8;
        for o in [&mut c.stage1, &mut c.stage2, &mut c.codec_training.optimizer] {
            o.epochs = 1;
            o.max_steps = Some(2);
        }
        let opts = DatasetOptions {
            n: c.dataset.n,
            seed: c.seed,
            image_size: c.image_size,
            ..DatasetOptions::default()
        };
        let manifest = build_dataset(&c.dataset_dir(), &opts).unwrap().0;
        let hash = c.hash().unwrap();
        let mut rec = RunRecorder::new(&c.output, "train-stage1", &hash, c.seed);
        let s1 = run_stage1(&c, &mut rec).unwrap();
        let mut rec = RunRecorder::new(&c.output, "train-stage2", &hash, c.seed);
        let s2 = run_stage2(&c, &s1.checkpoint, &mut rec).unwrap();
        Trained {
            dir,
            stage2: s2.checkpoint,
            config: c,
            manifest,
        }
    })
}

pub fn val_record(t: &Trained) -> floorgen::data::LoadedRecord {
    load_split(&t.manifest, Split::Val, t.config.image_size)
        .unwrap()
        .remove(0)
}
