//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` tables, then dotted-key overrides from the command line.

use std::fmt;
use std::path::{Path, PathBuf};

use glasseg::metrics::EvalOptions;
use glasseg::nnet::{BackboneKind, DecoderKind, FusionKind, InputKind, ModelConfig};
use glasseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// A problem with the configuration or arguments. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            train_split: "train".into(),
            test_split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub variant: Option<String>,
    pub device: Option<String>,
    pub set: Vec<String>,
}

impl RunConfig {
    /// Reads `path` (when given), applies `overrides` and validates the result.
    /// Relative data paths are resolved against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
                // Parsing the untouched text first keeps line numbers in the message.
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| config_error(format!("invalid config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().expect("already parsed")
            }
            None => toml::Table::new(),
        };
        for item in &overrides.set {
            apply_override(&mut table, item)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_error(format!("invalid override: {e}")))?;
        if let (Some(p), Some(m)) = (path, cfg.data.manifest.as_mut()) {
            if m.is_relative() {
                *m = p.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
        }
        if overrides.deterministic {
            cfg.train.deterministic = true;
        }
        if let Some(d) = &overrides.device {
            cfg.train.device = d.clone();
        }
        if let Some(v) = &overrides.variant {
            apply_variant(&mut cfg.model, v)?;
        }
        cfg.model.validate().map_err(|e| config_error(e.to_string()))?;
        cfg.train.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }

    /// The manifest path, from `explicit` or `data.manifest`; it must exist.
    pub fn manifest(&self, explicit: Option<&Path>) -> anyhow::Result<PathBuf> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| self.data.manifest.clone())
            .ok_or_else(|| config_error("missing required key `data.manifest` (set it in the config or pass --manifest)"))?;
        if !path.is_file() {
            return Err(config_error(format!("`data.manifest` points to {}, which does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> anyhow::Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Comma-separated variant names; each one sets the input, fusion, decoder
/// or backbone kind it names.
fn apply_variant(model: &mut ModelConfig, spec: &str) -> anyhow::Result<()> {
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Ok(k) = token.parse::<InputKind>() {
            model.input_kind = k;
        } else if let Ok(k) = token.parse::<FusionKind>() {
            model.fusion_kind = k;
        } else if let Ok(k) = token.parse::<DecoderKind>() {
            model.decoder_kind = k;
        } else if let Ok(k) = token.parse::<BackboneKind>() {
            model.backbone_kind = k;
        } else {
            return Err(config_error(format!("unknown variant `{token}`")));
        }
    }
    Ok(())
}
