use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

/// Git's blob id: SHA-1 over `"blob {len}\0"` followed by the bytes.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output dir when the file lives under it.
    pub path: String,
    pub git_sha1: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

/// Wall-clock timings live in a sidecar named by `timings_file`, so two runs
/// of the same config write byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub timings_file: String,
    #[serde(skip)]
    pub timings: Vec<Timing>,
}

impl RunManifest {
    /// Reads a manifest and, when present, its timings sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        if let Some(side) = path.parent().map(|p| p.join(&m.timings_file)) {
            if side.is_file() {
                let t = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
                m.timings = serde_json::from_str(&t)?;
            }
        }
        Ok(m)
    }
}

/// Collects artifacts and phase timings for one command and writes the run
/// manifest at the end.
pub struct RunRecorder {
    out: PathBuf,
    manifest: RunManifest,
    phase: Option<(String, Instant)>,
}

impl RunRecorder {
    pub fn new(out: &Path, command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                artifacts: Vec::new(),
                timings_file: String::new(),
                timings: Vec::new(),
            },
            phase: None,
        }
    }

    /// Starts timing `name`, closing any phase still open.
    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    pub fn end_phase(&mut self) {
        if let Some((name, start)) = self.phase.take() {
            self.manifest.timings.push(Timing {
                phase: name,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }

    /// Hashes a file already on disk and lists it.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let shown = path
            .strip_prefix(&self.out)
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| path.to_string_lossy().into_owned());
        self.manifest.artifacts.retain(|a| a.path != shown);
        self.manifest.artifacts.push(ArtifactEntry {
            path: shown,
            git_sha1: git_blob_sha1(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes `bytes` to `path` (creating parents) and lists it.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.record(path)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Writes `runs/{name}.json` and `runs/{name}.timings.json` under the
    /// output dir and returns the manifest path.
    pub fn finish(mut self, name: &str) -> Result<(PathBuf, RunManifest)> {
        self.end_phase();
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let dir = self.out.join("runs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.manifest.timings_file = format!("{name}.timings.json");
        let side = dir.join(&self.manifest.timings_file);
        let text = serde_json::to_string_pretty(&self.manifest.timings)? + "\n";
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
        let path = dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok((path, self.manifest))
    }
}
