//! Dataset manifest: a tab-separated index of prepared utterances.
//!
//! ```text
//! # svs manifest v1
//! config_hash  <hex>
//! id  labeling  speaker  frames  mel  cond
//! item0000  full  2  64  features/item0000.mel  features/item0000.cond
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::labelkit::{FrameConditions, Labeling};
use crate::{Error, Result};

const HEADER: &str = "# svs manifest v1";
const COLUMNS: &str = "id\tlabeling\tspeaker\tframes\tmel\tcond";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub labeling: Labeling,
    pub speaker_id: u32,
    pub frames: usize,
    pub mel: PathBuf,
    pub cond: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

/// Frame conditions on disk, tagged with the producing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondFile {
    pub config_hash: String,
    pub labeling: Labeling,
    pub conditions: FrameConditions,
}

impl CondFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("conditions serialize");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl Manifest {
    pub fn labeling_counts(&self) -> BTreeMap<Labeling, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.labeling).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nconfig_hash\t{}\n{COLUMNS}\n", self.config_hash);
        for e in &self.entries {
            out += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.labeling,
                e.speaker_id,
                e.frames,
                e.mel.display(),
                e.cond.display()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("manifest line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(bad(0, "missing header")),
        }
        let config_hash = match lines.next() {
            Some((_, l)) if l.starts_with("config_hash\t") => l["config_hash\t".len()..].to_string(),
            _ => return Err(bad(1, "missing config_hash")),
        };
        match lines.next() {
            Some((_, COLUMNS)) => {}
            _ => return Err(bad(2, "missing column row")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(i, "expected 6 fields"));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                labeling: f[1].parse().map_err(|_| bad(i, "bad labeling"))?,
                speaker_id: f[2].parse().map_err(|_| bad(i, "bad speaker"))?,
                frames: f[3].parse().map_err(|_| bad(i, "bad frame count"))?,
                mel: PathBuf::from(f[4]),
                cond: PathBuf::from(f[5]),
            });
        }
        Ok(Manifest { config_hash, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
