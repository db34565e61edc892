use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;

use causal_flow::data_io::write_atomic;

/// Provenance record written next to every run's results.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub git_revision: Option<&'static str>,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub outputs: Vec<PathBuf>,
    pub notes: serde_json::Map<String, serde_json::Value>,
}

/// Output directory of one run; tracks every file written into it.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(dir: &Path, command: &str, seed: u64) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                git_revision: option_env!("CAUSAL_FLOW_GIT_REV"),
                command: command.to_string(),
                argv: std::env::args().collect(),
                seed,
                config: serde_json::Value::Null,
                started_at: Utc::now(),
                finished_at: None,
                outputs: Vec::new(),
                notes: serde_json::Map::new(),
            },
        })
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.manifest.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    pub fn note<T: Serialize>(&mut self, key: &str, value: T) {
        if let Ok(v) = serde_json::to_value(value) {
            self.manifest.notes.insert(key.to_string(), v);
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `bytes` to `name` inside the run directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> causal_flow::Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        self.record(&p);
        Ok(p)
    }

    pub fn write_json<T: Serialize>(
        &mut self,
        name: &str,
        value: &T,
    ) -> causal_flow::Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, text.as_bytes())
    }

    pub fn record(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    pub fn finish(mut self) -> causal_flow::Result<PathBuf> {
        self.manifest.finished_at = Some(Utc::now());
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let p = self.dir.join("manifest.json");
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }
}
