use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use conformer_core::dataio::SplitSpec;
use conformer_core::model::ModelConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "CONFORMER_SEED";

/// Keys that belong to the run rather than the model.
const RUN_KEYS: [&str; 5] = ["data", "target", "split", "out_dir", "interval_seconds"];

/// Invalid user input; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Model configuration plus data and output locations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    pub split: SplitSpec,
    pub out_dir: PathBuf,
    /// Fixed sampling interval; inferred from the data when absent.
    pub interval_seconds: Option<i64>,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            target: None,
            split: SplitSpec::default(),
            out_dir: PathBuf::from("run"),
            interval_seconds: None,
            model: ModelConfig::default(),
        }
    }
}

fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match serde_json::from_value(v) {
            Ok(x) => Ok(Some(x)),
            Err(e) => usage(format!("config key '{key}': {e}")),
        },
    }
}

/// Parses a JSON config document; an empty document gives the defaults.
///
/// Model keys sit at the top level next to `data`, `target`, `split`,
/// `out_dir` and `interval_seconds`. Unknown keys are rejected.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if text.trim().is_empty() {
        return Ok(cfg);
    }
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return usage(format!("config is not valid JSON: {e}")),
    };
    let Value::Object(mut map) = value else {
        return usage("config must be a JSON object");
    };
    let mut run = Map::new();
    for key in RUN_KEYS {
        if let Some(v) = map.remove(key) {
            run.insert(key.to_string(), v);
        }
    }
    cfg.data = take(&mut run, "data")?;
    cfg.target = take(&mut run, "target")?;
    if let Some(s) = take(&mut run, "split")? {
        cfg.split = s;
    }
    if let Some(o) = take(&mut run, "out_dir")? {
        cfg.out_dir = o;
    }
    cfg.interval_seconds = take(&mut run, "interval_seconds")?;
    cfg.model = match serde_json::from_value(Value::Object(map)) {
        Ok(m) => m,
        Err(e) => return usage(format!("config: {e}")),
    };
    Ok(cfg)
}

/// Reads a config file (or the defaults) and applies the seed environment override.
pub fn load_config(path: Option<&Path>, env_seed: Option<String>) -> Result<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => match std::fs::read_to_string(p) {
            Ok(text) => parse_config_str(&text)?,
            Err(e) => return usage(format!("cannot read config {}: {e}", p.display())),
        },
    };
    if let Some(s) = env_seed {
        match s.trim().parse() {
            Ok(seed) => cfg.model.seed = seed,
            Err(_) => return usage(format!("{SEED_ENV} must be an unsigned integer, got '{s}'")),
        }
    }
    Ok(cfg)
}

/// Parses a kebab- or snake-case enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(parse_config_str("").unwrap(), RunConfig::default());
        assert_eq!(parse_config_str("{}").unwrap(), RunConfig::default());
        RunConfig::default().model.validate().unwrap();
    }

    #[test]
    fn run_and_model_keys_mix() {
        let c = parse_config_str(r#"{"lambda": 0.5, "data": "x.csv", "split": {"fractions": [0.6, 0.2, 0.2]}}"#).unwrap();
        assert_eq!(c.model.lambda, 0.5);
        assert_eq!(c.data.unwrap(), PathBuf::from("x.csv"));
        assert_eq!(c.split, SplitSpec::Fractions([0.6, 0.2, 0.2]));
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        let e = parse_config_str(r#"{"lamda": 0.5}"#).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        assert!(parse_config_str(r#"{"d": "wide"}"#).is_err());
        assert!(parse_config_str("[1]").is_err());
    }

    #[test]
    fn env_seed_applies() {
        let c = load_config(None, Some("42".into())).unwrap();
        assert_eq!(c.model.seed, 42);
        assert!(load_config(None, Some("x".into())).is_err());
    }

    #[test]
    fn enum_names() {
        use conformer_core::inputrep::InputVariant;
        assert_eq!(parse_enum::<InputVariant>("no-gamma").unwrap(), InputVariant::NoGamma);
        assert!(parse_enum::<InputVariant>("nope").is_err());
    }
}
