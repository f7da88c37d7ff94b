use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<FileRecord>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub exit_code: i32,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path) -> io::Result<Self> {
        let path = dir.join(MANIFEST);
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        } else {
            Ok(Self { tool: "ddrg".into(), version: env!("CARGO_PKG_VERSION").into(), runs: Vec::new() })
        }
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST), text)
    }
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn hash_file(path: &Path) -> io::Result<(String, u64)> {
    let bytes = fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn record(dir: &Path, path: &Path) -> io::Result<FileRecord> {
    let (sha256, bytes) = hash_file(path)?;
    let rel = path.strip_prefix(dir).unwrap_or(path);
    Ok(FileRecord { path: rel.to_string_lossy().replace('\\', "/"), sha256, bytes })
}

/// Files whose content no longer matches the manifest, as `(path, reason)`.
pub fn verify(dir: &Path, m: &RunManifest) -> Vec<(String, String)> {
    let mut bad = Vec::new();
    let mut seen: Vec<&str> = Vec::new();
    // only the latest record of each file is binding
    for run in m.runs.iter().rev() {
        for f in &run.files {
            if seen.contains(&f.path.as_str()) {
                continue;
            }
            seen.push(&f.path);
            match hash_file(&dir.join(&f.path)) {
                Ok((h, _)) if h == f.sha256 => {}
                Ok(_) => bad.push((f.path.clone(), "hash mismatch".into())),
                Err(e) => bad.push((f.path.clone(), e.to_string())),
            }
        }
    }
    bad
}

/// Directories at or below `root` (two levels) holding a manifest.
pub fn find_runs(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![(root.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        if dir.join(MANIFEST).is_file() {
            out.push(dir.clone());
        }
        if depth < 2 {
            for e in fs::read_dir(&dir)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push((p, depth + 1));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}
