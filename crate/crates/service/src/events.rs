//! The append-only event log.
//!
//! One JSON object per line, tagged by `event`:
//!
//! * `session`: `session_id`, `player_id`, `image_ids` (display order),
//!   `groups` (image id to `real` or `generated`; server side only) and
//!   `created_at` (Unix milliseconds).
//! * `rating`: `session_id`, `player_id`, `image_id`, `score` (integer 0 to 10)
//!   and `submitted_at` (Unix milliseconds).

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use floorgen::metrics::{score_summary, RatedScore, ScoreTable, Source};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub player_id: String,
    pub image_ids: Vec<String>,
    pub groups: BTreeMap<String, Source>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub player_id: String,
    pub image_id: String,
    pub score: u8,
    pub submitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Session(SessionRecord),
    Rating(RatingRecord),
}

pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) and returns the events already on disk.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<LogEvent>)> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let events = if path.exists() { Self::read(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<LogEvent>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })?;
            out.push(ev);
        }
        Ok(out)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line and syncs it to disk before returning.
    pub fn append(&mut self, event: &LogEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Per-group summaries over sessions whose every image has been rated.
/// Also returns the number of sessions and ratings counted.
pub fn stats_from_events(events: &[LogEvent]) -> Result<(ScoreTable, usize, usize), String> {
    // sessions in log order, so the result does not depend on hash order
    let mut sessions: Vec<&SessionRecord> = Vec::new();
    let mut ratings: HashMap<&str, Vec<&RatingRecord>> = HashMap::new();
    for ev in events {
        match ev {
            LogEvent::Session(s) => sessions.push(s),
            LogEvent::Rating(r) => ratings.entry(&r.session_id).or_default().push(r),
        }
    }
    let mut scores = Vec::new();
    let mut complete = 0;
    for s in sessions {
        let rs = ratings.get(s.session_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if rs.len() < s.image_ids.len() {
            continue;
        }
        complete += 1;
        for r in rs {
            let group = *s
                .groups
                .get(&r.image_id)
                .ok_or_else(|| format!("rating for unknown image {}", r.image_id))?;
            scores.push(RatedScore {
                group,
                score: f64::from(r.score),
            });
        }
    }
    let table = score_summary(&scores).map_err(|e| format!("insufficient data: {e}"))?;
    Ok((table, complete, scores.len()))
}
