//! Run configuration: a JSON object with flat dotted keys
//! (`"train.tau": 0.05`), overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use revela_core::baselines::ReplugConfig;
use revela_core::corpus::{DEFAULT_BATCH_SIZE, DEFAULT_MAX_WORDS};
use revela_core::training::{GradcheckConfig, TrainConfig};
use revela_core::transformer::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub max_words: usize,
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_words: DEFAULT_MAX_WORDS,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec!["ndcg@10".into(), "recall@100".into()],
            top_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single source of randomness for every subcommand.
    pub seed: u64,
    /// Language model.
    pub model: ModelConfig,
    pub retriever: ModelConfig,
    pub train: TrainConfig,
    pub replug: ReplugConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

/// Flat key/value settings before they are typed.
#[derive(Debug, Clone, Default)]
pub struct Settings(BTreeMap<String, Value>);

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(CliError::config("config must be a JSON object"));
        };
        let mut out = BTreeMap::new();
        for (k, v) in map {
            if v.is_object() {
                return Err(CliError::config(format!("key {k:?}: nested objects are not allowed; use dotted keys")));
            }
            if matches!(k.as_str(), "train.seed" | "replug.seed") {
                return Err(CliError::config(format!("key {k:?}: use the top-level \"seed\" key")));
            }
            out.insert(k, v);
        }
        Ok(Self(out))
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    /// Typed configuration; unknown keys are errors.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut root = Map::new();
        for (key, v) in &self.0 {
            insert_dotted(&mut root, key, v.clone())?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(Value::Object(root)).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.replug.seed = cfg.seed;
        // Short runs keep the default warmup only as far as it fits.
        if !self.contains("train.warmup_steps") {
            cfg.train.warmup_steps = cfg.train.warmup_steps.min(cfg.train.total_steps);
        }
        if !self.contains("replug.warmup_steps") {
            cfg.replug.warmup_steps = cfg.replug.warmup_steps.min(cfg.replug.total_steps);
        }
        Ok(cfg)
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, v: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().unwrap_or_default();
    if leaf.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("malformed key {key:?}")));
    }
    let mut node = root;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = match entry {
            Value::Object(m) => m,
            _ => return Err(CliError::config(format!("key {key:?} conflicts with scalar key {p:?}"))),
        };
    }
    if node.contains_key(leaf) {
        return Err(CliError::config(format!("key {key:?} conflicts with a longer dotted key")));
    }
    node.insert(leaf.to_string(), v);
    Ok(())
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl RunConfig {
    /// Every setting as flat dotted keys, plus the generator name.
    pub fn snapshot(&self) -> Value {
        let mut flat = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.remove("train.seed");
        flat.remove("replug.seed");
        flat.insert("rng".into(), Value::from(revela_core::rng::RNG_NAME));
        Value::Object(flat.into_iter().collect())
    }

    pub fn log_resolved(&self) {
        log::info!("resolved config {}", self.snapshot());
    }
}
