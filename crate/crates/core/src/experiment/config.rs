use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, Schedule};
use crate::error::{Error, Result};
use crate::evaluator::EvalThresholds;
use crate::guidance::GuidanceConfig;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Scalar>(&self) -> Result<Schedule<T>> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub pair_count: usize,
    pub images_per_prompt: usize,
    /// Image `j` of every prompt uses seed `base_seed + j`.
    pub base_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            pair_count: 40,
            images_per_prompt: 4,
            base_seed: 42,
        }
    }
}

/// Everything that determines the outcome of a run. Output location and
/// execution knobs live in [`RunOptions`] and never enter the hash.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub benchmark: BenchmarkConfig,
    pub evaluation: EvalThresholds,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.build::<f64>().map_err(|e| Error::Config(e.to_string()))?;
        self.guidance.validate(self.schedule.steps)?;
        self.evaluation.validate()?;
        if self.benchmark.images_per_prompt == 0 {
            return Err(Error::Config("images_per_prompt must be at least 1".into()));
        }
        if self.benchmark.pair_count == 0 {
            return Err(Error::Config("pair_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn backbone<T: Scalar>(&self) -> Result<Backbone<T>> {
        Backbone::new(self.backbone.clone())
    }

    /// Loads a TOML or JSON file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can (numbers, booleans, arrays) and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = serde_json::to_value(self).map_err(|e| Error::Serde(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            set_path(&mut tree, key.trim(), value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    /// Key-sorted compact JSON.
    pub fn canonical_json(&self) -> Result<String> {
        let tree = serde_json::to_value(self).map_err(|e| Error::Serde(e.to_string()))?;
        serde_json::to_string(&tree).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a table", parts[..i].join("."))))?;
        let slot = map
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config(format!("empty config key {key:?}")))
}

/// Execution knobs that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where artifacts go; nothing is written when `None`.
    pub out: Option<PathBuf>,
    /// Worker threads; 0 picks the machine default.
    pub workers: usize,
    /// Write per-image step traces as JSON lines.
    pub trace: bool,
    /// Write final latents as PGM images.
    pub dump_images: bool,
}

impl RunOptions {
    pub fn with_out(&self, out: Option<PathBuf>) -> Self {
        Self { out, ..self.clone() }
    }
}
