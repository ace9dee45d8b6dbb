//! The per-run manifest listing provenance and every emitted file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use trustgossip_core::protocol::Strategy;

use crate::error::{AppError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    /// SHA-256 over the generated category corpora.
    pub corpus_hash: String,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    /// Paths relative to the run directory, sorted, excluding the manifest.
    pub files: BTreeSet<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Records `paths`, which must lie inside `root`.
    pub fn add_files(&mut self, root: &Path, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            let rel = p
                .strip_prefix(root)
                .map_err(|_| AppError::format(p, format!("not inside run directory {}", root.display())))?;
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            self.files.insert(parts.join("/"));
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text).map_err(|e| AppError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(root: &Path) -> Result<RunManifest> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| AppError::format(&path, e.to_string()))
    }
}
