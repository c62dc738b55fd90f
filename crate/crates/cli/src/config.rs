//! Run configuration files: TOML, or JSON when the file is not valid TOML.
//!
//! Every section is optional and overlays the defaults key by key, so a file
//! holding only `[train] lr_video = 1e-3` keeps everything else.

use std::path::Path;

use alive_core::dit::DiTConfig;
use alive_core::flow::{Stage, TrainConfig};
use alive_core::synth::SynthConfig;
use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: DiTConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Synthetic training pairs.
    pub pairs: usize,
}

impl RunConfig {
    pub fn defaults(stage: Stage) -> Self {
        RunConfig {
            model: DiTConfig::desk(),
            train: TrainConfig::preset(stage),
            synth: SynthConfig::default(),
            pairs: 2000,
        }
    }

    /// Defaults for `stage` with the file's sections laid over them. Without
    /// a stage the file's own stage is accepted.
    pub fn load(path: Option<&Path>, stage: Option<Stage>) -> Result<Self> {
        let base = Self::defaults(stage.unwrap_or(Stage::Joint));
        let Some(path) = path else {
            return Ok(base);
        };
        let file = read_document(path)?;
        let Value::Object(sections) = &file else {
            bail!("{}: top level must be a table", path.display());
        };
        for key in sections.keys() {
            if !["model", "train", "synth", "pairs"].contains(&key.as_str()) {
                bail!("{}: unknown section {key:?}", path.display());
            }
        }
        let cfg = RunConfig {
            model: overlay(&base.model, sections.get("model")).context("section [model]")?,
            train: overlay(&base.train, sections.get("train")).context("section [train]")?,
            synth: overlay(&base.synth, sections.get("synth")).context("section [synth]")?,
            pairs: match sections.get("pairs") {
                Some(v) => serde_json::from_value(v.clone()).context("pairs")?,
                None => base.pairs,
            },
        };
        if let Some(stage) = stage.filter(|s| *s != cfg.train.stage) {
            bail!("config sets stage {:?} but --stage is {:?}", cfg.train.stage, stage);
        }
        Ok(cfg)
    }
}

/// Parses a TOML document, falling back to JSON.
pub fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match toml::from_str::<Value>(&text) {
        Ok(v) => Ok(v),
        Err(toml_err) => serde_json::from_str(&text)
            .with_context(|| format!("{} is neither TOML ({toml_err}) nor JSON", path.display())),
    }
}

pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(patch) = patch {
        let (Value::Object(dst), Value::Object(src)) = (&mut v, patch) else {
            bail!("expected a table");
        };
        for (k, x) in src {
            dst.insert(k.clone(), x.clone());
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// SHA-256 of the compact JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
