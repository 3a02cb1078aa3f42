//! Run configuration: a TOML file with `model`, `fusion`, `decoder`,
//! `train` and `data` sections, plus `key=value` overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, RsktModel};
use crate::transfer::DecoderConfig;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "RSKT_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest; empty when unset.
    pub manifest: String,
    /// Evaluation manifests.
    pub eval: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeSet<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let v = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    let mut keys = BTreeSet::new();
    flatten("", &v, &mut keys);
    keys
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty config key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key {key} crosses non-table {p}")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a config from optional TOML text, the seed environment
    /// variable, then `key=value` overrides, in that order.
    pub fn resolve(text: Option<&str>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(format!("config parse error: {e}")))?,
            None => toml::Table::new(),
        };
        if let Some(seed) = env_seed {
            let v: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            for key in ["train.seed", "model.seed"] {
                set_key(&mut table, key, toml::Value::Integer(v as i64))?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_key(&mut table, k.trim(), parse_literal(v.trim()))?;
        }
        let mut present = BTreeSet::new();
        flatten("", &toml::Value::Table(table.clone()), &mut present);
        let known = known_keys();
        if let Some(bad) = present.iter().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown config key {bad}")));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        let grid = self.model.image_size / self.model.patch_size;
        self.fusion.validate(grid, grid)?;
        self.decoder.validate(self.model.encoder_layers)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn build_model(&self) -> Result<RsktModel> {
        RsktModel::new(self.model.clone(), self.fusion.clone(), self.decoder.clone())
    }

    pub fn train_manifest(&self) -> Result<PathBuf> {
        if self.data.manifest.is_empty() {
            return Err(Error::Config("data.manifest is not set".into()));
        }
        let p = PathBuf::from(&self.data.manifest);
        if !p.is_file() {
            return Err(Error::Config(format!("data.manifest {} does not exist", p.display())));
        }
        Ok(p)
    }
}
