//! Experiment configuration: JSON file plus dotted command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use sffn_core::training::{ModelConfig, TrainConfig};

/// Published JSON schema of [`ExperimentConfig`].
pub const SCHEMA: &str = include_str!("../config.schema.json");

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Where the training text comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus file read as raw bytes. `None` uses the built-in smoke corpus.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

/// Everything one invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses `text`, applies `overrides` (`a.b.c=value`) and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("invalid config at `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text, overrides).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("invalid config at `model`")?;
        self.train.validate().context("invalid config at `train`")?;
        if !(self.train.val_fraction > 0.0 && self.train.val_fraction < 1.0) {
            bail!("invalid config at `train.val_fraction`: must lie in (0, 1)");
        }
        Ok(())
    }

    /// Canonical serialization with `out_dir` cleared; the manifest hash is
    /// taken over it, so the output location does not change the hash.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets `path=value` inside `root`, creating objects on the way. The value is
/// read as JSON when it parses and as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key.path=value"))?;
    let path = path.trim_start_matches("--");
    if path.is_empty() || path.split('.').any(str::is_empty) {
        bail!("override `{spec}` has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{spec}`: `{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one part")
}

/// Splits `--a.b=v` style overrides from the other arguments.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, _)) if key.contains('.') => overrides.push(a[2..].to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MINIMAL: &str = r#"{
        "model": {
            "layers": 2, "d": 16, "seq_len": 8, "vocab_size": 256, "sffn_layers": [1],
            "memory": {"multiplier": 1, "block_size": 8, "active_cells": 32},
            "selector": {"kind": "avgk"}
        }
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL, &[]).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data.path, None);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = vec!["model.d=32".to_string(), "train.optim.peak_lr=0.002".into(), "data.path=/tmp/x.txt".into()];
        let c = ExperimentConfig::from_json(MINIMAL, &o).unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.train.optim.peak_lr, 0.002);
        assert_eq!(c.data.path.as_deref(), Some(Path::new("/tmp/x.txt")));
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_json(MINIMAL, &["model.memory.blocks=3".into()]).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("model.memory") && msg.contains("blocks"), "{msg}");
        let err = ExperimentConfig::from_json(MINIMAL, &["model.d=\"wide\"".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("model.d"));
    }

    #[test]
    fn semantic_errors_are_caught_before_compute() {
        let err = ExperimentConfig::from_json(MINIMAL, &["model.sffn_layers=[5]".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("model"));
        assert!(ExperimentConfig::from_json(MINIMAL, &["train.batch_size=0".into()]).is_err());
    }

    #[test]
    fn override_parsing() {
        let mut v = json!({"a": {"b": 1}});
        apply_override(&mut v, "a.c.d=[1,2]").unwrap();
        apply_override(&mut v, "--a.b=word").unwrap();
        assert_eq!(v, json!({"a": {"b": "word", "c": {"d": [1, 2]}}}));
        assert!(apply_override(&mut v, "a.b.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
        let (rest, ov) = split_overrides(["train", "--seed", "3", "--model.d=8", "--out=x"].map(String::from));
        assert_eq!(rest, ["train", "--seed", "3", "--out=x"]);
        assert_eq!(ov, ["model.d=8"]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json(MINIMAL, &[]).unwrap();
        let b = ExperimentConfig::from_json(MINIMAL, &["seed=1".into()]).unwrap();
        assert_eq!(a.sha256(), ExperimentConfig::from_json(MINIMAL, &[]).unwrap().sha256());
        assert_ne!(a.sha256(), b.sha256());
        let moved = ExperimentConfig::from_json(MINIMAL, &["out_dir=elsewhere".into()]).unwrap();
        assert_eq!(a.sha256(), moved.sha256());
        assert_eq!(a.sha256().len(), 64);
    }

    #[test]
    fn schema_lists_every_top_level_key() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let c = serde_json::to_value(ExperimentConfig::from_json(MINIMAL, &[]).unwrap()).unwrap();
        let props = schema["properties"].as_object().unwrap();
        for key in c.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "{key}");
        }
        for key in c["model"].as_object().unwrap().keys() {
            assert!(schema["$defs"]["model"]["properties"].get(key).is_some(), "model.{key}");
        }
        for key in c["train"].as_object().unwrap().keys() {
            assert!(schema["$defs"]["train"]["properties"].get(key).is_some(), "train.{key}");
        }
    }
}
