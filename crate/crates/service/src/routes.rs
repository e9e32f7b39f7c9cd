use std::time::Duration;

use axum::extract::{Multipart, Path, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use floorgen::control::FootprintMask;
use floorgen::ImageGrid;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::error::ApiError;
use crate::events::stats_from_events;
use crate::state::{AppState, Job, JobStatus, MAX_GENERATE};

pub const IMAGE_ID_HEADER: &str = "x-image-id";

/// Share of mask pixels allowed strictly between 0.1 and 0.9 luminance.
const MAX_GREY_FRACTION: f64 = 0.05;

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([HeaderName::from_static(IMAGE_ID_HEADER)]);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/images/{k}", get(session_image))
        .route("/sessions/{id}/ratings", post(rate))
        .route("/stats", get(stats))
        .route("/generate", post(generate))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/images/{k}", get(job_image))
        .layer(cors)
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    let sessions = s.read_game().sessions.len();
    Json(json!({
        "status": "ok",
        "checkpoint_loaded": s.generator.is_some(),
        "sessions": sessions,
    }))
}

#[derive(Deserialize)]
struct NewSession {
    player_id: String,
}

async fn create_session(
    State(s): State<AppState>,
    body: Result<Json<NewSession>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    if req.player_id.trim().is_empty() {
        return Err(ApiError::Unprocessable("player_id must not be empty".into()));
    }
    let rec = s.create_session(req.player_id)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "session_id": rec.session_id,
            "image_count": rec.image_ids.len(),
            "image_ids": rec.image_ids,
        })),
    ))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let game = s.read_game();
    let session = game
        .sessions
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))?;
    Ok(Json(json!({
        "session_id": session.record.session_id,
        "player_id": session.record.player_id,
        "image_count": session.record.image_ids.len(),
        "image_ids": session.record.image_ids,
        "rated": session.scores.len(),
        "next_index": session.next_index(),
        "complete": session.next_index().is_none(),
    })))
}

fn png(bytes: Vec<u8>, image_id: Option<&str>) -> Response {
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], bytes).into_response();
    if let Some(id) = image_id.and_then(|id| HeaderValue::from_str(id).ok()) {
        resp.headers_mut().insert(IMAGE_ID_HEADER, id);
    }
    resp
}

async fn session_image(State(s): State<AppState>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let image_id = {
        let game = s.read_game();
        let session = game
            .sessions
            .get(&id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))?;
        k.checked_sub(1)
            .and_then(|i| session.record.image_ids.get(i))
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no image at position {k}")))?
    };
    let img = s
        .pools
        .images
        .get(&image_id)
        .ok_or_else(|| ApiError::NotFound(format!("image {image_id} left the pool")))?;
    let bytes = tokio::fs::read(&img.path)
        .await
        .map_err(|e| ApiError::Internal(format!("reading image {image_id}: {e}")))?;
    Ok(png(bytes, Some(&image_id)))
}

#[derive(Deserialize)]
struct Rating {
    image_id: String,
    score: Value,
}

async fn rate(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Rating>, axum::extract::rejection::JsonRejection>,
) -> Result<StatusCode, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    let score = req
        .score
        .as_u64()
        .filter(|v| *v <= 10)
        .ok_or_else(|| ApiError::Unprocessable(format!("score must be an integer in 0..=10, got {}", req.score)))?;
    s.rate(&id, &req.image_id, score as u8)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn stats(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let game = s.read_game();
    let (table, sessions, ratings) = stats_from_events(&game.events).map_err(ApiError::Conflict)?;
    Ok(Json(json!({
        "real": table.real,
        "generated": table.generated,
        "t_test": table.t_test,
        "sessions": sessions,
        "ratings": ratings,
        "table": table.render(),
    })))
}

struct GenerateRequest {
    prompt: String,
    mask: Vec<u8>,
    steps: usize,
    n: usize,
    seed: Option<u64>,
}

fn parse_field<T: std::str::FromStr>(name: &str, text: &str) -> Result<T, ApiError> {
    text.trim()
        .parse()
        .map_err(|_| ApiError::Unprocessable(format!("{name}: cannot parse {text:?}")))
}

async fn read_generate(mut mp: Multipart) -> Result<GenerateRequest, ApiError> {
    let (mut prompt, mut mask, mut steps, mut n, mut seed) = (None, None, None, None, None);
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::Unprocessable(e.body_text());
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "mask" => mask = Some(field.bytes().await.map_err(bad)?.to_vec()),
            "prompt" => prompt = Some(field.text().await.map_err(bad)?),
            "steps" => steps = Some(parse_field("steps", &field.text().await.map_err(bad)?)?),
            "n" => n = Some(parse_field("n", &field.text().await.map_err(bad)?)?),
            "seed" => {
                let t = field.text().await.map_err(bad)?;
                if !t.trim().is_empty() {
                    seed = Some(parse_field("seed", &t)?);
                }
            }
            other => log::debug!("ignoring multipart field {other:?}"),
        }
    }
    let missing = |f: &str| ApiError::Unprocessable(format!("missing field {f}"));
    Ok(GenerateRequest {
        prompt: prompt.ok_or_else(|| missing("prompt"))?,
        mask: mask.ok_or_else(|| missing("mask"))?,
        steps: steps.ok_or_else(|| missing("steps"))?,
        n: n.unwrap_or(1),
        seed,
    })
}

/// Decodes an uploaded mask, rejecting greyscale art and empty footprints.
/// A mask of the wrong size is resized to `size` with a warning.
pub fn prepare_mask(bytes: &[u8], size: usize, warnings: &mut Vec<String>) -> Result<FootprintMask, ApiError> {
    let grid = ImageGrid::decode_png(bytes).map_err(|e| ApiError::Unprocessable(format!("mask: {e}")))?;
    let lum = grid.luminance();
    let grey = lum.iter().filter(|v| **v > 0.1 && **v < 0.9).count();
    if grey as f64 > MAX_GREY_FRACTION * lum.len() as f64 {
        return Err(ApiError::Unprocessable(format!(
            "mask is not binary: {grey} of {} pixels are neither black nor white",
            lum.len()
        )));
    }
    let mut mask = FootprintMask::from_grid(&grid);
    if mask.height() != size || mask.width() != size {
        warnings.push(format!(
            "mask resized from {}x{} to {size}x{size}",
            mask.height(),
            mask.width()
        ));
        mask = mask.resized(size, size);
    }
    if mask.is_empty() {
        return Err(ApiError::Unprocessable("mask: footprint is empty".into()));
    }
    Ok(mask)
}

async fn generate(State(s): State<AppState>, mp: Multipart) -> Result<(StatusCode, Json<Value>), ApiError> {
    let generator = s
        .generator
        .clone()
        .ok_or_else(|| ApiError::Unavailable("no checkpoint loaded".into()))?;
    let req = read_generate(mp).await?;
    let t = generator.max_steps();
    if req.steps == 0 || req.steps > t {
        return Err(ApiError::Unprocessable(format!("steps must be in 1..={t}")));
    }
    if req.n == 0 || req.n > MAX_GENERATE {
        return Err(ApiError::Unprocessable(format!("n must be in 1..={MAX_GENERATE}")));
    }
    let mut warnings = Vec::new();
    let mask = if generator.is_controlled() {
        Some(prepare_mask(&req.mask, generator.image_size(), &mut warnings)?)
    } else {
        warnings.push("checkpoint has no control branch; the mask is ignored".into());
        None
    };
    let seed = req.seed.unwrap_or_else(|| s.next_seed());

    let slot = s.gen_queue.clone().lock_owned().await;
    let (prompt, steps, n) = (req.prompt, req.steps, req.n);
    let task = tokio::task::spawn_blocking(move || {
        // the queue slot is held until the model is free, even past a timeout
        let _slot = slot;
        generator
            .generate(&prompt, mask.as_ref(), steps, n, seed)?
            .iter()
            .map(|im| im.encode_png())
            .collect::<floorgen::Result<Vec<_>>>()
    });
    let budget = Duration::from_secs(s.config.generate_timeout_secs);
    let (status, images, error) = match tokio::time::timeout(budget, task).await {
        Ok(Ok(Ok(images))) => (JobStatus::Done, images, None),
        Ok(Ok(Err(e))) => return Err(e.into()),
        Ok(Err(e)) => return Err(ApiError::Internal(format!("generation task: {e}"))),
        Err(_) => (
            JobStatus::Failed,
            Vec::new(),
            Some(format!("exceeded {}s budget", budget.as_secs())),
        ),
    };
    let job_id = {
        let mut jobs = s.jobs.lock().unwrap_or_else(|e| e.into_inner());
        let id = format!("job-{:06}", jobs.len() + 1);
        jobs.insert(
            id.clone(),
            Job {
                status: status.clone(),
                seed,
                steps,
                warnings: warnings.clone(),
                error: error.clone(),
                images,
            },
        );
        id
    };
    let code = match status {
        JobStatus::Done => StatusCode::CREATED,
        JobStatus::Failed => StatusCode::GATEWAY_TIMEOUT,
    };
    Ok((
        code,
        Json(json!({
            "job_id": job_id,
            "status": status,
            "seed": seed,
            "image_count": n,
            "warnings": warnings,
            "error": error,
        })),
    ))
}

fn find_job(s: &AppState, id: &str) -> Result<Job, ApiError> {
    s.jobs
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("unknown job {id}")))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let job = find_job(&s, &id)?;
    let b64 = base64::engine::general_purpose::STANDARD;
    Ok(Json(json!({
        "job_id": id,
        "status": job.status,
        "seed": job.seed,
        "steps": job.steps,
        "warnings": job.warnings,
        "error": job.error,
        "images": job.images.iter().map(|b| b64.encode(b)).collect::<Vec<_>>(),
    })))
}

async fn job_image(State(s): State<AppState>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let job = find_job(&s, &id)?;
    let bytes = k
        .checked_sub(1)
        .and_then(|i| job.images.get(i))
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("job {id} has no image {k}")))?;
    Ok(png(bytes, None))
}
