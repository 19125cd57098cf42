use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.toml";

/// Provenance record written into every output directory before anything
/// else, and rewritten with the finish time on success.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub started: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    /// Input path → sha256 of its bytes (files) or of its sorted file
    /// listing with per-file digests (directories).
    pub inputs: BTreeMap<String, String>,
    pub config: toml::Table,
}

impl RunManifest {
    pub fn new(command: &str, config: toml::Table) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            inputs: BTreeMap::new(),
            config,
        }
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn finish(&mut self, dir: &Path) -> io::Result<PathBuf> {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.write(dir)
    }
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            files_under(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
        }
    }
    Ok(())
}

pub fn hash_path(path: &Path) -> io::Result<String> {
    if !path.is_dir() {
        return Ok(hex::encode(Sha256::digest(fs::read(path)?)));
    }
    let mut files = Vec::new();
    files_under(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let digest = Sha256::digest(fs::read(path.join(&f))?);
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(digest);
    }
    Ok(hex::encode(h.finalize()))
}
