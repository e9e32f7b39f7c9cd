use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use floorgen::metrics::Source;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct PoolImage {
    pub id: String,
    pub group: Source,
    pub path: PathBuf,
}

/// Real and generated plans addressed by opaque ids. An id is a salted hash
/// of the group and file name, so it reveals neither.
#[derive(Debug, Clone, Default)]
pub struct ImagePools {
    pub images: BTreeMap<String, PoolImage>,
    pub real: Vec<String>,
    pub generated: Vec<String>,
}

fn pngs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn opaque_id(salt: u64, group: Source, name: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.to_le_bytes());
    h.update([group as u8]);
    h.update(name.as_bytes());
    hex::encode(&h.finalize()[..8])
}

impl ImagePools {
    pub fn load(real_dir: &Path, generated_dir: &Path, salt: u64) -> std::io::Result<Self> {
        let mut pools = Self::default();
        for (dir, group) in [(real_dir, Source::Real), (generated_dir, Source::Generated)] {
            for path in pngs(dir)? {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let id = opaque_id(salt, group, &name);
                match group {
                    Source::Real => pools.real.push(id.clone()),
                    Source::Generated => pools.generated.push(id.clone()),
                }
                pools.images.insert(id.clone(), PoolImage { id, group, path });
            }
        }
        Ok(pools)
    }

    pub fn group_of(&self, id: &str) -> Option<Source> {
        self.images.get(id).map(|i| i.group)
    }
}
