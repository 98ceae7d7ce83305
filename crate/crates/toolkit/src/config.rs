//! Run configuration: one TOML document, addressable by dotted keys.

use std::collections::BTreeMap;
use std::path::Path;

use hypermod::metrics::{FeatureExtractor, IdentityExtractor, RandomConvExtractor};
use hypermod::{EvalConfig, PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Result, ToolError};

/// Key prefix of run bookkeeping stored alongside the config in manifests.
pub const MANIFEST_SECTION: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// `random_conv` or `identity`.
    pub kind: String,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { kind: "random_conv".into(), seed: 0 }
    }
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        match self.kind.as_str() {
            "random_conv" => Ok(Box::new(RandomConvExtractor::new(self.seed))),
            "identity" => Ok(Box::new(IdentityExtractor)),
            other => Err(ToolError::Config(format!(
                "extractor.kind = {other:?} is not one of \"random_conv\", \"identity\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Samples per class in progress grids.
    pub grid_samples: usize,
    /// Seed of the latents shown in progress grids.
    pub grid_seed: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint_interval: 500, grid_samples: 8, grid_seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub extractor: ExtractorConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(ToolError::io(p))?;
                text.parse::<Table>()
                    .map_err(|e| ToolError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        table.remove(MANIFEST_SECTION);
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ToolError::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let given = flatten(&table);
        let cfg: RunConfig =
            Value::Table(table).try_into().map_err(|e: toml::de::Error| ToolError::Config(e.message().to_string()))?;
        let known = flatten(&cfg.to_table()?);
        let unknown: Vec<&String> = given.keys().filter(|k| !known.contains_key(*k)).collect();
        if !unknown.is_empty() {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(ToolError::Config(format!(
                "unknown config key(s): {} (run `hypermod defaults` for the full list)",
                names.join(", ")
            )));
        }
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<Table> {
        match Value::try_from(self).map_err(|e| ToolError::Config(e.to_string()))? {
            Value::Table(t) => Ok(t),
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// `key = value` lines in key order.
    pub fn to_flat_string(&self) -> Result<String> {
        Ok(flat_lines(&self.to_table()?))
    }
}

/// Bare words that do not parse as TOML are taken as strings.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ToolError::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match slot {
            Value::Table(t) => t,
            _ => return Err(ToolError::Config(format!("{key:?}: {p:?} is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Leaf values keyed by dotted path; arrays are leaves.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, t: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(sub) => walk(&key, sub, out),
                leaf => {
                    out.insert(key, leaf.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

pub fn flat_lines(table: &Table) -> String {
    flatten(table).iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let d = RunConfig::default();
        let text = d.to_flat_string().unwrap();
        assert!(text.contains("train.mode = \"hyper_v\""));
        let path = std::env::temp_dir().join(format!("hm-cfg-{}.toml", std::process::id()));
        std::fs::write(&path, &text).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), d);
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::load(
            None,
            &["train.steps=7".into(), "train.mode=per_class".into(), "train.ema.half_life_kimg=0.5".into()],
        )
        .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.mode, hypermod::TrainingMode::PerClass);
        assert_eq!(c.train.ema.half_life_kimg, Some(0.5));
        let e = RunConfig::load(None, &["train.stepz=7".into()]).unwrap_err();
        assert!(e.to_string().contains("train.stepz"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert_eq!(RunConfig::load(None, &["train.mode=bogus".into()]).unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::load(None, &["nokey".into()]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn extractor_kinds() {
        assert_eq!(ExtractorConfig::default().build().unwrap().id(), RandomConvExtractor::new(0).id());
        let bad = ExtractorConfig { kind: "inception".into(), seed: 0 };
        assert_eq!(bad.build().err().unwrap().exit_code(), 2);
    }
}
