//! Run configuration: defaults, then a TOML file, then `--set` / command flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use partigen::data::ConditioningParams;
use partigen::metrics::DEFAULT_SPLITS;
use partigen::training::{ModelSpec, TrainConfig};
use partigen::wnet::GeneratorSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Usage;

/// Name of the resolved config written into every output directory.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Heat-map and mask settings used by `prepare` and everything downstream.
    pub data: ConditioningParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder blocks: 6 for 128x64 data, 7 for 256x256.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Divides every channel count; 1 is the full network.
    pub channel_divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            height: 128,
            width: 64,
            channel_divisor: 1,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec::scaled(
            GeneratorSpec::with_depth(self.depth, self.height, self.width),
            self.channel_divisor,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Classifier backend name (`synthetic` or `uniform`).
    pub backend: String,
    pub splits: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            backend: "synthetic".into(),
            splits: DEFAULT_SPLITS,
        }
    }
}

/// A merged config with its canonical text and hash.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub text: String,
    pub hash: String,
}

impl Resolved {
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `section.key=value`; the value is read as TOML, falling back to a bare string.
fn assignment(spec: &str) -> Result<toml::Value> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Usage(format!("--set expects key=value, got `{spec}`")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut out = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(Usage(format!("bad config key `{key}`")).into());
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), out);
        out = toml::Value::Table(t);
    }
    Ok(out)
}

pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Resolved> {
    let mut value = toml::Value::try_from(RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(table));
    }
    for s in sets {
        merge(&mut value, assignment(s)?);
    }
    let config: RunConfig = value.try_into().map_err(|e| Usage(format!("config: {e}")))?;
    config.train.validate().map_err(|e| Usage(format!("config: {e}")))?;
    config
        .model
        .spec()
        .generator
        .validate()
        .map_err(|e| Usage(format!("config: {e}")))?;
    if config.eval.splits == 0 {
        return Err(Usage("config: eval.splits must be positive".into()).into());
    }
    if !(config.data.sigma > 0.0) {
        return Err(Usage("config: data.sigma must be positive".into()).into());
    }
    let text = toml::to_string(&config)?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    Ok(Resolved { config, text, hash })
}

/// Reads a previously echoed config.
pub fn load_resolved(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(RESOLVED_NAME);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}
