use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Everything needed to rerun a command: its resolved inputs, seed and the
/// files it produced.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub started_unix_s: f64,
    pub timings_ms: BTreeMap<String, f64>,
}

pub struct Recorder {
    manifest: RunManifest,
    clock: Instant,
}

impl Recorder {
    pub fn new(subcommand: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Self {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                seed: None,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                outputs: Vec::new(),
                started_unix_s: started,
                timings_ms: BTreeMap::new(),
            },
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, config: &impl Serialize) {
        self.manifest.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Records the time since the previous mark under `phase`.
    pub fn mark(&mut self, phase: &str) {
        self.manifest.timings_ms.insert(phase.to_string(), self.clock.elapsed().as_secs_f64() * 1e3);
        self.clock = Instant::now();
    }

    /// Writes the manifest to `path` atomically.
    pub fn finish(mut self, path: &Path) -> std::io::Result<PathBuf> {
        self.mark("finish");
        let text = serde_json::to_vec_pretty(&self.manifest).map_err(std::io::Error::other)?;
        write_atomic(path, &text)?;
        Ok(path.to_path_buf())
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// `<artifact>.manifest.json`
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
