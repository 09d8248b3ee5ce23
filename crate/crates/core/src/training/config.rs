//! `key = value` run configuration.
//!
//! Keys are dotted paths into [`RunConfig`] (`model.d_model`, `moe.variant`,
//! `dense_train.steps`, ...). `#` starts a comment. Unknown keys and values
//! of the wrong kind are rejected.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TrainConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub dev_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            dev_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialization and expansion.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub moe: MoeConfig,
    pub dense_train: TrainConfig,
    pub moe_train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            moe: MoeConfig::default(),
            dense_train: TrainConfig {
                eval_interval: 250,
                eval_examples: 200,
                ..TrainConfig::default()
            },
            moe_train: TrainConfig {
                lr: 1e-3,
                eval_interval: 250,
                eval_examples: 200,
                ..TrainConfig::default()
            },
        }
    }
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim())));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults overridden by the assignments in `text`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (line, k, v) in parse_kv(text)? {
            c.set(&k, &v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(c)
    }

    /// Sets one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        }
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() && !value.contains(['.', 'e', 'E']) => Value::from(value.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => {
                let f: f64 = value.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)?
            }
            Value::String(_) => Value::String(value.to_string()),
            Value::Object(_) | Value::Array(_) | Value::Null => return Err(Error::Config(format!("`{key}` is not a settable value"))),
        };
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Every setting as sorted `key = value` lines; `from_kv` reads it back.
    pub fn to_kv(&self) -> String {
        let mut lines = Vec::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut lines);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.moe.validate()?;
        self.dense_train.validate()?;
        self.moe_train.validate()?;
        let s = &self.split;
        if !(s.dev_frac >= 0.0 && s.test_frac >= 0.0 && s.dev_frac + s.test_frac < 1.0) {
            return Err(Error::Config("split fractions must be non-negative and sum below 1".into()));
        }
        Ok(())
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(o) => {
            for (k, x) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(x, &key, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}
