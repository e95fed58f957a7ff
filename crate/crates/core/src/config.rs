//! TOML run configuration: dataset paths, model, training and ablation
//! settings, optionally layered on a named task preset.
//!
//! Preset values replace the defaults of the five fields they cover; keys
//! written explicitly in the file win over the preset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::trainer::{Preset, TrainConfig, TrainData, PRESETS};

/// File name of the verbatim config copy inside a run directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub data: DataPaths,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.origin)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        if let Some(field) = &self.field {
            write!(f, ": field `{field}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// One-based line of the key at dotted `path`, looked up under its table header.
fn line_of(text: &str, path: &str) -> Option<usize> {
    let (table, key) = match path.rsplit_once('.') {
        Some((t, k)) => (t, k),
        None => ("", path),
    };
    let key_at = |l: &str| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    };
    let mut current = String::new();
    let mut fallback = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if key_at(line) {
            if current == table {
                return Some(i + 1);
            }
            fallback.get_or_insert(i + 1);
        }
    }
    text.lines()
        .position(|l| l.trim() == format!("[{path}]"))
        .map(|i| i + 1)
        .or(fallback)
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses `text` strictly into `T`; errors carry the line and, where known, the field.
pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().trim().to_string();
        let field = message
            .strip_prefix("unknown field `")
            .and_then(|r| r.split('`').next())
            .map(String::from);
        ConfigError {
            origin: origin.to_string(),
            line: e.span().map(|s| line_at(text, s.start)),
            field,
            message,
        }
    })
}

/// Wraps a semantic validation message whose first word is the dotted field path.
fn semantic(text: &str, origin: &str, message: String) -> ConfigError {
    let first = message.split_whitespace().next().unwrap_or("").trim_end_matches([',', ':']);
    let field = (first.contains('.') || line_of(text, first).is_some()).then(|| first.to_string());
    ConfigError {
        origin: origin.to_string(),
        line: field.as_deref().and_then(|f| line_of(text, f)),
        field,
        message,
    }
}

fn explicit(table: &toml::Table, path: &[&str]) -> bool {
    let mut t = table;
    for (i, key) in path.iter().enumerate() {
        match t.get(*key) {
            Some(toml::Value::Table(inner)) if i + 1 < path.len() => t = inner,
            Some(_) if i + 1 == path.len() => return true,
            _ => return false,
        }
    }
    false
}

impl RunConfig {
    /// Parses, applies the preset and validates. Relative paths are left as written.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg: RunConfig = parse_toml(text, origin)?;
        let raw: toml::Table = parse_toml(text, origin)?;
        if let Some(name) = &cfg.preset {
            let preset = Preset::find(name).ok_or_else(|| ConfigError {
                origin: origin.to_string(),
                line: line_of(text, "preset"),
                field: Some("preset".into()),
                message: format!(
                    "unknown preset {name:?} (expected one of {})",
                    PRESETS.iter().map(|p| p.name).collect::<Vec<_>>().join(", ")
                ),
            })?;
            let (mut model, mut train) = (cfg.model.clone(), cfg.train.clone());
            preset.apply(&mut model, &mut train);
            if !explicit(&raw, &["train", "batch_size"]) {
                cfg.train.batch_size = train.batch_size;
            }
            if !explicit(&raw, &["train", "adv_lambda"]) {
                cfg.train.adv_lambda = train.adv_lambda;
            }
            if !explicit(&raw, &["train", "weights", "ib"]) {
                cfg.train.weights.ib = train.weights.ib;
            }
            if !explicit(&raw, &["model", "encoder", "k_tokens"]) {
                cfg.model.encoder.k_tokens = model.encoder.k_tokens;
            }
            if !explicit(&raw, &["model", "encoder", "dtab", "queue_capacity"]) {
                cfg.model.encoder.dtab.queue_capacity = model.encoder.dtab.queue_capacity;
            }
        }
        cfg.model
            .validate()
            .and_then(|_| cfg.train.validate())
            .map_err(|m| semantic(text, origin, m))?;
        if cfg.ablation.seeds.is_empty() {
            return Err(semantic(text, origin, "ablation.seeds must not be empty".into()));
        }
        Ok(cfg)
    }

    /// Reads and parses `path`; relative data and output paths resolve against its directory.
    pub fn load(path: &Path) -> Result<(RunConfig, String), ConfigError> {
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            origin: origin.clone(),
            line: None,
            field: None,
            message: e.to_string(),
        })?;
        let mut cfg = RunConfig::parse(&text, &origin)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.source);
        resolve(&mut cfg.data.target);
        if let Some(t) = cfg.data.test.as_mut() {
            resolve(t);
        }
        if let Some(o) = cfg.out.as_mut() {
            resolve(o);
        }
        Ok((cfg, text))
    }

    pub fn load_data(&self) -> crate::Result<TrainData> {
        TrainData::from_manifests(&self.data.source, &self.data.target, self.data.test.as_deref())
    }
}

impl SynthSpec {
    pub fn parse(text: &str, origin: &str) -> Result<SynthSpec, ConfigError> {
        let spec: SynthSpec = parse_toml(text, origin)?;
        spec.validate().map_err(|m| semantic(text, origin, m))?;
        Ok(spec)
    }
}

/// Copies the config text byte for byte into `dir`.
pub fn echo_config(text: &str, dir: &Path) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, text)?;
    Ok(path)
}
