use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use floorgen::metrics::Source;
use floorgen::pipeline::Generator;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::ApiError;
use crate::events::{stats_from_events, EventLog, LogEvent, RatingRecord, SessionRecord};
use crate::pools::ImagePools;

pub const SESSION_IMAGES: usize = 30;
pub const MAX_GENERATE: usize = 8;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub real_dir: PathBuf,
    pub generated_dir: PathBuf,
    pub log_path: PathBuf,
    /// Seeds session ids, image draws and generation seeds left unset by the client.
    pub seed: u64,
    /// Wall-clock budget for one generation request.
    pub generate_timeout_secs: u64,
}

impl ServiceConfig {
    pub fn new(real_dir: impl Into<PathBuf>, generated_dir: impl Into<PathBuf>, log_path: impl Into<PathBuf>) -> Self {
        Self {
            real_dir: real_dir.into(),
            generated_dir: generated_dir.into(),
            log_path: log_path.into(),
            seed: 0,
            generate_timeout_secs: 60,
        }
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub(crate) struct Session {
    pub record: SessionRecord,
    pub scores: HashMap<String, u8>,
}

impl Session {
    /// 1-based position of the first unrated image, `None` once all are rated.
    pub fn next_index(&self) -> Option<usize> {
        self.record
            .image_ids
            .iter()
            .position(|id| !self.scores.contains_key(id))
            .map(|i| i + 1)
    }
}

pub(crate) struct Game {
    pub sessions: HashMap<String, Session>,
    pub events: Vec<LogEvent>,
    pub log: EventLog,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub(crate) struct Job {
    pub status: JobStatus,
    pub seed: u64,
    pub steps: usize,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub images: Vec<Vec<u8>>,
}

/// Shared service state. Readers share the game lock; every write (new
/// session, rating) holds it exclusively, so the log has a single writer.
#[derive(Clone)]
pub struct AppState {
    pub(crate) config: Arc<ServiceConfig>,
    pub(crate) pools: Arc<ImagePools>,
    pub(crate) game: Arc<RwLock<Game>>,
    pub(crate) generator: Option<Arc<Generator>>,
    /// Generation queue. Tokio's mutex grants the lock in request order.
    pub(crate) gen_queue: Arc<tokio::sync::Mutex<()>>,
    pub(crate) jobs: Arc<Mutex<BTreeMap<String, Job>>>,
}

impl AppState {
    /// Loads the image pools and replays the event log at `config.log_path`.
    pub fn new(config: ServiceConfig, generator: Option<Generator>) -> std::io::Result<Self> {
        let pools = ImagePools::load(&config.real_dir, &config.generated_dir, config.seed)?;
        let (log, events) = EventLog::open(&config.log_path)?;
        let mut sessions = HashMap::new();
        for ev in &events {
            match ev {
                LogEvent::Session(s) => {
                    sessions.insert(
                        s.session_id.clone(),
                        Session {
                            record: s.clone(),
                            scores: HashMap::new(),
                        },
                    );
                }
                LogEvent::Rating(r) => {
                    if let Some(s) = sessions.get_mut(&r.session_id) {
                        s.scores.insert(r.image_id.clone(), r.score);
                    }
                }
            }
        }
        // a fresh stream per replay length keeps restarted servers from reissuing ids
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ (events.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        log::info!(
            "replayed {} events ({} sessions) from {}",
            events.len(),
            sessions.len(),
            config.log_path.display()
        );
        Ok(Self {
            config: Arc::new(config),
            pools: Arc::new(pools),
            game: Arc::new(RwLock::new(Game {
                sessions,
                events,
                log,
                rng,
            })),
            generator: generator.map(Arc::new),
            gen_queue: Arc::new(tokio::sync::Mutex::new(())),
            jobs: Arc::new(Mutex::new(BTreeMap::new())),
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.config.log_path
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_deref()
    }

    pub(crate) fn read_game(&self) -> std::sync::RwLockReadGuard<'_, Game> {
        self.game.read().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn write_game(&self) -> std::sync::RwLockWriteGuard<'_, Game> {
        self.game.write().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn create_session(&self, player_id: String) -> Result<SessionRecord, ApiError> {
        let half = SESSION_IMAGES / 2;
        if self.pools.real.len() < half || self.pools.generated.len() < half {
            return Err(ApiError::Conflict(format!(
                "each image pool needs at least {half} images"
            )));
        }
        let mut game = self.write_game();
        let rng = &mut game.rng;
        let mut ids: Vec<String> = self.pools.real.choose_multiple(rng, half).cloned().collect();
        ids.extend(self.pools.generated.choose_multiple(rng, half).cloned());
        ids.shuffle(rng);
        let groups: BTreeMap<String, Source> = ids.iter().map(|id| (id.clone(), self.pools.images[id].group)).collect();
        let session_id = format!("{:016x}", rng.random::<u64>());
        let record = SessionRecord {
            session_id: session_id.clone(),
            player_id,
            image_ids: ids,
            groups,
            created_at: now_ms(),
        };
        let ev = LogEvent::Session(record.clone());
        game.log
            .append(&ev)
            .map_err(|e| ApiError::Internal(format!("event log: {e}")))?;
        game.events.push(ev);
        game.sessions.insert(
            session_id,
            Session {
                record: record.clone(),
                scores: HashMap::new(),
            },
        );
        Ok(record)
    }

    /// Check, append and apply happen under one exclusive lock, so duplicate
    /// submissions race to exactly one success.
    pub(crate) fn rate(&self, session_id: &str, image_id: &str, score: u8) -> Result<(), ApiError> {
        let mut game = self.write_game();
        let session = game
            .sessions
            .get(session_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {session_id}")))?;
        if !session.record.groups.contains_key(image_id) {
            return Err(ApiError::NotFound(format!("image {image_id} is not in this session")));
        }
        if session.scores.contains_key(image_id) {
            return Err(ApiError::Conflict(format!("image {image_id} already rated")));
        }
        let record = RatingRecord {
            session_id: session_id.to_string(),
            player_id: session.record.player_id.clone(),
            image_id: image_id.to_string(),
            score,
            submitted_at: now_ms(),
        };
        let ev = LogEvent::Rating(record);
        game.log
            .append(&ev)
            .map_err(|e| ApiError::Internal(format!("event log: {e}")))?;
        game.events.push(ev);
        let session = game.sessions.get_mut(session_id).expect("checked above");
        session.scores.insert(image_id.to_string(), score);
        if session.next_index().is_none() {
            self.snapshot(&game.events);
        }
        Ok(())
    }

    /// Rewrites `<log>.stats.json` after a session completes. The snapshot is
    /// informational; `/stats` always recomputes from the log.
    fn snapshot(&self, events: &[LogEvent]) {
        let Ok((table, sessions, ratings)) = stats_from_events(events) else {
            return;
        };
        let path = self.config.log_path.with_extension("stats.json");
        let body = serde_json::json!({ "stats": table, "sessions": sessions, "ratings": ratings, "at": now_ms() });
        if let Err(e) = std::fs::write(&path, body.to_string()) {
            log::warn!("stats snapshot {}: {e}", path.display());
        }
    }

    pub(crate) fn next_seed(&self) -> u64 {
        // masked so the seed survives a round trip through JSON numbers
        self.write_game().rng.random::<u64>() & ((1 << 53) - 1)
    }
}
