//! Run manifests: what a command was asked to do, which seeds it used, and
//! the content hash of every file it read or wrote.
//!
//! The manifest itself is deterministic. Wall-clock facts go to a separate
//! timing file so that repeated runs produce byte-identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{file_sha256, write_atomic};
use crate::config::{ExperimentConfig, Profile, ValueSource};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory when the file lives inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl ArtifactRecord {
    pub fn of(root: &Path, file: &Path) -> Result<Self> {
        let bytes = std::fs::metadata(file)?.len();
        Ok(Self {
            path: display_path(root, file),
            sha256: file_sha256(file)?,
            bytes,
        })
    }
}

fn display_path(root: &Path, file: &Path) -> String {
    match file.strip_prefix(root) {
        Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
        Err(_) => file.to_string_lossy().into_owned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: Status,
    pub message: Option<String>,
    /// Command-specific headline numbers.
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub code_version: String,
    pub profile: Profile,
    pub config: ExperimentConfig,
    pub sources: BTreeMap<String, ValueSource>,
    pub global_seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub consumed: Vec<ArtifactRecord>,
    pub produced: Vec<ArtifactRecord>,
    /// Name of the wall-clock record beside the manifest.
    pub timing_file: String,
    pub outcome: Outcome,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    pub fn timing_file_name(command: &str) -> String {
        format!("timing_{command}.json")
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(Self::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "manifest schema {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Checks that every referenced file exists and still hashes the same.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for rec in self.consumed.iter().chain(&self.produced) {
            let p = Path::new(&rec.path);
            let path = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            if !path.exists() {
                return Err(Error::Input(format!("manifest lists missing file {}", rec.path)));
            }
            let found = file_sha256(&path)?;
            if found != rec.sha256 {
                return Err(Error::hash_mismatch(&rec.path, &rec.sha256, &found));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub started_unix_seconds: f64,
    pub elapsed_seconds: f64,
}

impl Timing {
    pub fn write(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&root.join(RunManifest::timing_file_name(&self.command)), text.as_bytes())
    }
}

/// Collects what one command reads and writes.
#[derive(Debug, Default)]
pub struct Recorder {
    pub consumed: Vec<PathBuf>,
    pub produced: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
}

impl Recorder {
    pub fn consume(&mut self, path: &Path) {
        if !self.consumed.iter().any(|p| p == path) {
            self.consumed.push(path.to_path_buf());
        }
    }

    pub fn produce(&mut self, path: &Path) {
        if !self.produced.iter().any(|p| p == path) {
            self.produced.push(path.to_path_buf());
        }
    }

    pub fn seed(&mut self, label: &str, value: u64) -> u64 {
        self.seeds.insert(label.to_string(), value);
        value
    }

    /// Hash records, skipping files that were never written.
    pub fn records(root: &Path, paths: &[PathBuf]) -> Result<Vec<ArtifactRecord>> {
        let mut out: Vec<ArtifactRecord> = paths
            .iter()
            .filter(|p| p.exists())
            .map(|p| ArtifactRecord::of(root, p))
            .collect::<Result<_>>()?;
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }
}
