//! Run configuration files.
//!
//! A config file is flat TOML whose keys are the fields of the training and
//! decoding configs (`seed` sets both). An optional `[classifier]` table
//! holds classifier fields. Command-line flags override file values.
//!
//! ```toml
//! learning_rate = 0.003
//! warmup_steps = 50
//! epochs = 3
//! temperature = 0.7
//!
//! [classifier]
//! epochs = 2
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use comae::classifier::ClassifierConfig;
use comae::decoding::DecodeConfig;
use comae::training::TrainingConfig;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::usage;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub decode: DecodeConfig,
    pub classifier: ClassifierConfig,
}

fn field_names<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => Value::from(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

/// Overlays `overrides` on the serialized `base` and parses the result.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, overrides: Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Value::Object(m) = &mut v {
        m.extend(overrides);
    }
    serde_json::from_value(v).map_err(|e| usage(format!("config: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| usage(format!("config: {e}")))?;
        let defaults = RunConfig::default();
        let train_keys = field_names(&defaults.training);
        let decode_keys = field_names(&defaults.decode);
        let (mut t, mut d, mut c) = (Map::new(), Map::new(), Map::new());
        for (key, value) in table {
            if key == "classifier" {
                match toml_to_json(value) {
                    Value::Object(m) => c = m,
                    _ => return Err(usage("config: `classifier` must be a table")),
                }
                continue;
            }
            let known_t = train_keys.contains(&key);
            let known_d = decode_keys.contains(&key);
            if !known_t && !known_d {
                return Err(usage(format!("config: unknown key `{key}`")));
            }
            let value = toml_to_json(value);
            if known_t {
                t.insert(key.clone(), value.clone());
            }
            if known_d {
                d.insert(key, value);
            }
        }
        Ok(RunConfig {
            training: overlay(&defaults.training, t)?,
            decode: overlay(&defaults.decode, d)?,
            classifier: overlay(&defaults.classifier, c)?,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_split_between_configs() {
        let c = RunConfig::parse("epochs = 3\nseed = 9\ntemperature = 0.5\n[classifier]\nepochs = 1\n").unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!((c.training.seed, c.decode.seed), (9, 9));
        assert_eq!(c.decode.temperature, 0.5);
        assert_eq!(c.classifier.epochs, 1);
        assert_eq!(c.training.batch_size, TrainingConfig::default().batch_size);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_usage_errors() {
        for bad in ["epochz = 3", "epochs = \"three\"", "[classifier]\nfoo = 1", "= ="] {
            let e = RunConfig::parse(bad).unwrap_err();
            assert!(e.downcast_ref::<crate::UsageError>().is_some(), "{bad}: {e}");
        }
    }
}
