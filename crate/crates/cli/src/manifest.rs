use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// `<command>.manifest.json`, so commands sharing a directory keep
/// separate records.
pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}

/// Record of one command invocation and everything it wrote.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub graph_fingerprint: Option<String>,
    pub cache_fingerprint: Option<String>,
    pub seeds: Vec<u64>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub fn hex(fp: u64) -> String {
    format!("{fp:016x}")
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            tool: "ringformer".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            threads: rayon::current_num_threads(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            graph_fingerprint: None,
            cache_fingerprint: None,
            seeds: Vec::new(),
        }
    }

    pub fn write(mut self, dir: &Path) -> anyhow::Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        let path = manifest_path(dir, &self.command);
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(dir: &Path, command: &str) -> anyhow::Result<Self> {
        let path = manifest_path(dir, command);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
