//! Run configuration files.
//!
//! ```json
//! {
//!   "train": { "lr": 0.0002, "betas": [0.9, 0.999], "eps": 1e-8, "batch_size": 64,
//!              "epochs": 8, "k": 4, "dropout": 0.5, "seed": 0, "use_negatives": true,
//!              "use_decentralization": true, "fuse_columns": false },
//!   "generator": { "panel_size": 32, "id_offset": 0, "max_attempts": 64,
//!                  "allowed_rules": ["constant", "increase", "decrease", "distribute_three"] },
//!   "transductive": false
//! }
//! ```
//!
//! `train` and all of its keys are required. `generator` is optional but
//! complete when present. Unknown keys anywhere are errors, and every problem
//! in a file is reported at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::synth::{GeneratorConfig, PANEL_SIZES};
use crate::trainer::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Also train on the (unlabeled) evaluation problems.
    #[serde(default)]
    pub transductive: bool,
}

#[derive(Clone, Copy)]
enum Kind {
    PositiveNumber,
    Number,
    UnitPair,
    Count,
    Bool,
    RuleList,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::PositiveNumber => "a positive number",
            Kind::Number => "a number",
            Kind::UnitPair => "an array of two numbers",
            Kind::Count => "a non-negative integer",
            Kind::Bool => "a boolean",
            Kind::RuleList => "an array of rule names",
        }
    }

    fn accepts(self, v: &Value) -> bool {
        match self {
            Kind::PositiveNumber => v.as_f64().is_some_and(|x| x > 0.0),
            Kind::Number => v.is_number(),
            Kind::UnitPair => v.as_array().is_some_and(|a| a.len() == 2 && a.iter().all(Value::is_number)),
            Kind::Count => v.as_u64().is_some(),
            Kind::Bool => v.is_boolean(),
            Kind::RuleList => {
                v.as_array().is_some_and(|a| a.iter().all(|r| serde_json::from_value::<crate::synth::Rule>(r.clone()).is_ok()))
            }
        }
    }
}

const TRAIN_KEYS: &[(&str, Kind)] = &[
    ("lr", Kind::PositiveNumber),
    ("betas", Kind::UnitPair),
    ("eps", Kind::PositiveNumber),
    ("batch_size", Kind::Count),
    ("epochs", Kind::Count),
    ("k", Kind::Count),
    ("dropout", Kind::Number),
    ("seed", Kind::Count),
    ("use_negatives", Kind::Bool),
    ("use_decentralization", Kind::Bool),
    ("fuse_columns", Kind::Bool),
];

const GENERATOR_KEYS: &[(&str, Kind)] =
    &[("panel_size", Kind::Count), ("id_offset", Kind::Count), ("allowed_rules", Kind::RuleList), ("max_attempts", Kind::Count)];

fn check_section(section: &str, obj: &Map<String, Value>, keys: &[(&str, Kind)], out: &mut Vec<String>) {
    for (key, kind) in keys {
        match obj.get(*key) {
            None => out.push(format!("{section}.{key}: missing, expected {}", kind.describe())),
            Some(v) if !kind.accepts(v) => out.push(format!("{section}.{key}: expected {}, got {v}", kind.describe())),
            Some(_) => {}
        }
    }
    for key in obj.keys() {
        if !keys.iter().any(|(k, _)| k == key) {
            out.push(format!("{section}.{key}: unknown key"));
        }
    }
}

/// Every schema violation of `value`, in document order of the schema.
pub fn schema_violations(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(root) = value.as_object() else {
        return vec!["top level: expected an object".into()];
    };
    match root.get("train") {
        None => out.push("train: missing, expected an object".into()),
        Some(Value::Object(t)) => check_section("train", t, TRAIN_KEYS, &mut out),
        Some(v) => out.push(format!("train: expected an object, got {v}")),
    }
    match root.get("generator") {
        None => {}
        Some(Value::Object(g)) => check_section("generator", g, GENERATOR_KEYS, &mut out),
        Some(v) => out.push(format!("generator: expected an object, got {v}")),
    }
    if let Some(v) = root.get("transductive") {
        if !v.is_boolean() {
            out.push(format!("transductive: expected a boolean, got {v}"));
        }
    }
    for key in root.keys() {
        if !["train", "generator", "transductive"].contains(&key.as_str()) {
            out.push(format!("{key}: unknown key"));
        }
    }
    out
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut problems = schema_violations(&value);
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        problems.extend(config.train.violations());
        if !PANEL_SIZES.contains(&config.generator.panel_size) {
            problems.push(format!("generator.panel_size: expected one of {PANEL_SIZES:?}, got {}", config.generator.panel_size));
        }
        if !config.generator.allowed_rules.iter().any(|r| *r != crate::synth::Rule::Constant) {
            problems.push("generator.allowed_rules: needs at least one non-constant rule".into());
        }
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_json(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn generator_section_is_optional() {
        let train = serde_json::to_string(&TrainConfig::default()).unwrap();
        let c = RunConfig::from_json(&format!(r#"{{"train": {train}}}"#)).unwrap();
        assert_eq!(c.generator, GeneratorConfig::default());
        assert!(!c.transductive);
    }

    #[test]
    fn all_violations_are_reported() {
        let text = r#"{
            "train": {"lr": "fast", "betas": [0.9], "eps": 1e-8, "batch_size": 64, "epochs": 1,
                      "k": 4, "dropout": 0.5, "seed": 0, "use_negatives": 1,
                      "use_decentralization": true, "momentum": 0.9},
            "generator": {"panel_size": 32},
            "extra": 1
        }"#;
        let Err(ConfigError::Invalid(v)) = RunConfig::from_json(text) else { panic!("accepted") };
        let joined = v.join("\n");
        for needle in [
            "train.lr: expected a positive number",
            "train.betas: expected an array of two numbers",
            "train.use_negatives: expected a boolean",
            "train.fuse_columns: missing",
            "train.momentum: unknown key",
            "generator.id_offset: missing",
            "generator.allowed_rules: missing",
            "extra: unknown key",
        ] {
            assert!(joined.contains(needle), "{needle} not in\n{joined}");
        }
        assert_eq!(v.len(), 9, "{joined}");
    }

    #[test]
    fn semantic_checks_follow_schema_checks() {
        let mut c = RunConfig::default();
        c.train.k = 12;
        c.generator.panel_size = 40;
        let Err(ConfigError::Invalid(v)) = RunConfig::from_json(&c.to_json()) else { panic!("accepted") };
        assert_eq!(v.len(), 2, "{v:?}");
    }
}
