//! Per-run provenance record written next to each command's output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved options, after merging any config file.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file (for directories, of their manifest).
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub wall_clock_ms: f64,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let target = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    Ok(hex::encode(Sha256::digest(std::fs::read(target)?)))
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value) -> Self {
        let started_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                config,
                seeds: BTreeMap::new(),
                input_hashes: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix_ms,
                wall_clock_ms: 0.0,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    /// Records the hash of an input. URLs are recorded verbatim.
    pub fn input(&mut self, path: &str) -> std::io::Result<()> {
        let hash = if path.starts_with("http://") || path.starts_with("https://") {
            "remote".to_string()
        } else {
            sha256_file(Path::new(path))?
        };
        self.manifest.input_hashes.insert(path.to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: impl AsRef<Path>) {
        self.manifest.outputs.push(path.as_ref().display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> std::io::Result<RunManifest> {
        self.manifest.wall_clock_ms = self.started.elapsed().as_secs_f64() * 1e3;
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(std::io::Error::other)?;
        std::fs::write(path, json)?;
        Ok(self.manifest)
    }
}

/// `<out>.manifest.json`.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
