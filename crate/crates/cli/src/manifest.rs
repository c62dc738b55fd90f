//! One manifest per artifact-producing command.
//!
//! Timestamps and the git description live only here, so the artifacts
//! themselves stay byte-identical across runs with the same seed.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
    /// Command-specific summary.
    #[serde(skip_serializing_if = "Value::is_null")]
    pub summary: Value,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, config_hash: String, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash,
            seed,
            git_describe: git_describe(),
            started_at: now(),
            finished_at: String::new(),
            outputs: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn finish(mut self, path: &Path, summary: Value) -> Result<()> {
        self.finished_at = now();
        self.summary = summary;
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `dir/manifest.json` for directory outputs, `file.manifest.json` beside a file output.
pub fn path_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
