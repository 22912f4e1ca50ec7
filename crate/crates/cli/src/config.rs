use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use starnet::model::ModelConfig;
use starnet::pipeline::TrainConfig;
use starnet::synthdata::PhaseGrammar;

use crate::CliError;

pub const SEED_ENV: &str = "STARNET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSON file holding a phase grammar; the built-in grammar when unset.
    pub grammar: Option<PathBuf>,
    pub num_videos: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            grammar: None,
            num_videos: 100,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Everything one invocation needs. Parsed from a JSON file, then patched by
/// command-line overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Dataset directory read by training and evaluation, written by `gen-data`.
    pub dataset: PathBuf,
    /// Parent of every run directory.
    pub runs_dir: PathBuf,
    /// Overrides the model, training and data seeds at once.
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads `path` (if any), applies the seed environment variable, then
    /// `key=value` overrides in order. Nothing is written.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            set_path(&mut doc, "seed", Value::from(seed))?;
        }
        for (key, value) in overrides {
            set_path(&mut doc, key, value.clone())?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.dataset.as_os_str().is_empty() {
            cfg.dataset = PathBuf::from("data");
        }
        if cfg.runs_dir.as_os_str().is_empty() {
            cfg.runs_dir = PathBuf::from("runs");
        }
        if let Some(seed) = cfg.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.data.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.grammar()?.validate()?;
        if self.data.num_videos == 0 {
            return Err(CliError::Config("data.num_videos must be positive".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(CliError::Config("data.train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn grammar(&self) -> Result<PhaseGrammar, CliError> {
        let Some(path) = &self.data.grammar else {
            return Ok(PhaseGrammar::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, otherwise
/// as a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if key.is_empty() {
        return Err("empty key".into());
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("`{key}`: `{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
