//! Scripted players over real HTTP against the rating service.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;

use floorgen::metrics::{score_summary, RatedScore, ScoreTable};
use floorgen::ImageGrid;
use floorgen_service::{serve_on, AppState, EventLog, LogEvent, ServiceConfig};
use serde_json::{json, Value};

use crate::{fail, verdict, Check};

struct Resp {
    status: u16,
    head: String,
    body: Vec<u8>,
}

impl Resp {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

fn dechunk(mut raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let Some(pos) = raw.windows(2).position(|w| w == b"\r\n") else {
            return out;
        };
        let size = usize::from_str_radix(String::from_utf8_lossy(&raw[..pos]).trim(), 16).unwrap_or(0);
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&raw[pos + 2..pos + 2 + size]);
        raw = &raw[pos + 4 + size..];
    }
}

fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> Result<Resp, String> {
    let mut s = TcpStream::connect(addr).map_err(fail)?;
    let payload = body.map(Value::to_string).unwrap_or_default();
    let mut req =
        format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nOrigin: http://game.local\r\n");
    if body.is_some() {
        req.push_str(&format!(
            "Content-Type: application/json\r\nContent-Length: {}\r\n",
            payload.len()
        ));
    }
    req.push_str("\r\n");
    req.push_str(&payload);
    s.write_all(req.as_bytes()).map_err(fail)?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).map_err(fail)?;
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or("truncated response")?;
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let status = head
        .split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or("bad status line")?;
    let mut body = raw[split + 4..].to_vec();
    if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        body = dechunk(&body);
    }
    Ok(Resp { status, head, body })
}

fn start(rt: &tokio::runtime::Runtime, cfg: &ServiceConfig) -> Result<SocketAddr, String> {
    let state = AppState::new(cfg.clone(), None).map_err(fail)?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(fail)?;
    let addr = listener.local_addr().map_err(fail)?;
    rt.spawn(serve_on(listener, state));
    Ok(addr)
}

fn write_pool(dir: &Path, n: usize, shade: f32) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(fail)?;
    for i in 0..n {
        let v = shade + 0.01 * i as f32;
        ImageGrid::filled(16, 16, 3, v)
            .save_png(&dir.join(format!("plan_{i:03}.png")))
            .map_err(fail)?;
    }
    Ok(())
}

/// Recomputes the score table from the raw log: complete sessions in log
/// order, each session's ratings in log order.
fn offline_table(log: &Path) -> Result<ScoreTable, String> {
    let events = EventLog::read(log).map_err(fail)?;
    let mut scores = Vec::new();
    for ev in &events {
        let LogEvent::Session(s) = ev else { continue };
        let rated: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Rating(r) if r.session_id == s.session_id => Some(r),
                _ => None,
            })
            .collect();
        if rated.len() < s.image_ids.len() {
            continue;
        }
        for r in rated {
            scores.push(RatedScore {
                group: s.groups[&r.image_id],
                score: f64::from(r.score),
            });
        }
    }
    score_summary(&scores).map_err(fail)
}

pub fn service_contract() -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let (real, generated) = (dir.path().join("real"), dir.path().join("generated"));
    write_pool(&real, 20, 0.2)?;
    write_pool(&generated, 18, 0.5)?;
    let mut cfg = ServiceConfig::new(&real, &generated, dir.path().join("log/events.jsonl"));
    cfg.seed = 3;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(fail)?;
    let addr = start(&rt, &cfg)?;

    let mut scanned = Vec::new();
    let mut leaks = Vec::new();
    let mut scan = |what: String, r: &Resp| {
        let text = format!("{}\n{}", r.head, String::from_utf8_lossy(&r.body)).to_lowercase();
        for label in ["real", "generated"] {
            if text.contains(label) {
                leaks.push(format!("{what} contains {label:?}"));
            }
        }
        scanned.push(what);
    };

    scan("GET /health".into(), &http(addr, "GET", "/health", None)?);
    for (p, player) in ["ada", "bo", "cy"].iter().enumerate() {
        let r = http(addr, "POST", "/sessions", Some(&json!({ "player_id": player })))?;
        if r.status != 201 {
            return Err(format!("POST /sessions returned {}", r.status));
        }
        scan("POST /sessions".into(), &r);
        let v = r.json();
        let sid = v["session_id"].as_str().ok_or("no session id")?.to_string();
        let ids: Vec<String> = v["image_ids"]
            .as_array()
            .ok_or("no image ids")?
            .iter()
            .filter_map(|x| x.as_str().map(String::from))
            .collect();
        // the third player leaves after ten images
        let todo = if p == 2 { 10 } else { ids.len() };
        for (k, id) in ids.iter().enumerate().take(todo) {
            let img = http(addr, "GET", &format!("/sessions/{sid}/images/{}", k + 1), None)?;
            if img.status != 200 {
                return Err(format!("image {} of {sid}: {}", k + 1, img.status));
            }
            scan("GET /sessions/{id}/images/{k}".into(), &img);
            let score = (k * 7 + p * 3) % 11;
            let r = http(
                addr,
                "POST",
                &format!("/sessions/{sid}/ratings"),
                Some(&json!({ "image_id": id, "score": score })),
            )?;
            if r.status != 204 {
                return Err(format!("rating returned {}", r.status));
            }
            scan("POST /sessions/{id}/ratings".into(), &r);
        }
        scan(
            "GET /sessions/{id}".into(),
            &http(addr, "GET", &format!("/sessions/{sid}"), None)?,
        );
        let dup = http(
            addr,
            "POST",
            &format!("/sessions/{sid}/ratings"),
            Some(&json!({ "image_id": ids[0], "score": 5 })),
        )?;
        scan("duplicate rating".into(), &dup);
        scan(
            "bad score".into(),
            &http(
                addr,
                "POST",
                &format!("/sessions/{sid}/ratings"),
                Some(&json!({ "image_id": ids[1], "score": 12 })),
            )?,
        );
        scan(
            "image out of range".into(),
            &http(addr, "GET", &format!("/sessions/{sid}/images/31"), None)?,
        );
    }
    scan(
        "unknown session".into(),
        &http(addr, "GET", "/sessions/ffffffffffffffff", None)?,
    );
    scan(
        "POST /generate without a model".into(),
        &http(addr, "POST", "/generate", Some(&json!({})))?,
    );
    scan(
        "GET /jobs/{id} unknown".into(),
        &http(addr, "GET", "/jobs/job-000001", None)?,
    );

    let stats = http(addr, "GET", "/stats", None)?;
    if stats.status != 200 {
        return Err(format!(
            "/stats returned {}: {}",
            stats.status,
            String::from_utf8_lossy(&stats.body)
        ));
    }
    let sv = stats.json();
    let offline = offline_table(&cfg.log_path)?;
    let matches = sv["real"] == serde_json::to_value(offline.real).map_err(fail)?
        && sv["generated"] == serde_json::to_value(offline.generated).map_err(fail)?
        && sv["t_test"] == serde_json::to_value(offline.t_test).map_err(fail)?
        && sv["table"] == json!(offline.render())
        && sv["sessions"] == json!(2)
        && sv["ratings"] == json!(60);

    let replay_addr = start(&rt, &cfg)?;
    let replayed = http(replay_addr, "GET", "/stats", None)?;
    let identical = replayed.status == 200 && replayed.body == stats.body;
    rt.shutdown_background();

    verdict(
        leaks.is_empty() && matches && identical,
        format!(
            "{} responses scanned, {} label leaks{}; /stats equals offline recompute: {matches}; replayed /stats byte-identical: {identical}",
            scanned.len(),
            leaks.len(),
            leaks.first().map(|l| format!(" (first: {l})")).unwrap_or_default()
        ),
    )
}
