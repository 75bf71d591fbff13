//! Training configuration files and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticConfig, DEFAULT_SPLIT};
use crate::error::{CopaError, Result};
use crate::model::ModelConfig;
use crate::schema::ConceptSchema;

/// Learning rate for runs from random initialization.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
/// Learning rate for fine-tuning a pretrained backbone.
pub const PRETRAINED_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Paths relative to the config file.
    Manifest { manifest: PathBuf, schema: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    pub fn load(&self, image_size: usize) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => {
                if cfg.image_size != image_size {
                    return Err(CopaError::invalid(
                        "data.image_size",
                        format!("{} does not match model.backbone.image_size {image_size}", cfg.image_size),
                    ));
                }
                data::generate_synthetic(cfg)
            }
            DataSource::Manifest { manifest, schema } => {
                let schema = ConceptSchema::load(schema)?;
                data::load_manifest(manifest, &schema, image_size)
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Manifest { manifest, schema } = self {
            for p in [manifest, schema] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the concept alignment loss.
    pub lambda: f64,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub data: DataSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 12,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda: crate::diagnosis::DEFAULT_LAMBDA,
            split: DEFAULT_SPLIT,
            split_seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            data: DataSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Reads a TOML config and applies `key.path=value` overrides before
    /// deserializing.
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CopaError::io(path, e))?;
        let mut cfg = Self::parse_with_overrides(&text, overrides).map_err(|e| match e {
            CopaError::Parse { message, .. } => CopaError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.data.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(parse_error)?;
        let mut table = toml::Table::try_from(Self::default()).map_err(parse_error)?;
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides to an in-memory config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| CopaError::invalid("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CopaError::invalid("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CopaError::invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CopaError::invalid("learning_rate", "must be positive"));
        }
        crate::diagnosis::LossConfig::new(self.lambda)?;
        self.model.backbone.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CopaError::invalid("config", e.to_string()))
    }
}

/// Deep merge; a table carrying a `kind` tag replaces the default wholesale.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_error(e: impl std::fmt::Display) -> CopaError {
    CopaError::Parse {
        path: "<config>".into(),
        message: e.to_string(),
    }
}

/// Sets `a.b.c=value` inside a TOML table. The value is parsed as a TOML
/// literal and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CopaError::invalid("--set", format!("{assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CopaError::invalid("--set", format!("bad key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CopaError::invalid("--set", format!("{key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
