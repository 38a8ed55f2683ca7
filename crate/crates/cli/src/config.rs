//! The experiment config file: `{"model": {..}, "train": {..}, "manifest": ".."}`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use mam::model::ModelConfig;
use mam::objectives::Mode;
use mam::trainer::TrainConfig;
use mam::Error;
use serde::Deserialize;
use serde_json::Value;

pub const SEED_VAR: &str = "MAM_SEED";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    #[serde(default)]
    model: Value,
    #[serde(default)]
    train: Value,
    manifest: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
}

/// `MAM_SEED`, when set; a malformed value is a config error.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR}=`{s}` is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn section(v: Value, name: &str) -> Result<serde_json::Map<String, Value>> {
    match v {
        Value::Null => Ok(Default::default()),
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("`{name}` must be an object")).into()),
    }
}

fn fill_seed(m: &mut serde_json::Map<String, Value>, seed: Option<u64>) {
    if let Some(s) = seed {
        m.entry("seed").or_insert(Value::from(s));
    }
}

/// Parses a config. The mode is read as a plain string so a bad one
/// reports `unknown mode`; `default_mode` applies when none is given.
pub fn parse(text: &str, default_mode: Mode) -> Result<Experiment> {
    let raw: Raw = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let seed = env_seed()?;
    let mut model = section(raw.model, "model")?;
    let mut train = section(raw.train, "train")?;
    fill_seed(&mut model, seed);
    fill_seed(&mut train, seed);
    let mode = match train.remove("mode") {
        None => default_mode,
        Some(Value::String(s)) => Mode::from_str(&s)?,
        Some(other) => return Err(Error::UnknownMode(other.to_string()).into()),
    };
    let model: ModelConfig = serde_json::from_value(Value::Object(model)).map_err(|e| Error::Config(format!("model: {e}")))?;
    let mut train: TrainConfig = serde_json::from_value(Value::Object(train)).map_err(|e| Error::Config(format!("train: {e}")))?;
    train.mode = mode;
    model.validate()?;
    train.validate()?;
    Ok(Experiment {
        model,
        train,
        manifest: raw.manifest,
    })
}

pub fn load(path: &Path, default_mode: Mode) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
        .context("reading config")?;
    parse(&text, default_mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes() {
        let e = parse(r#"{"train": {"mode": "mam_mtl", "steps": 3}}"#, Mode::St).unwrap();
        assert_eq!(e.train.mode, Mode::MamMtl);
        assert_eq!(e.train.steps, 3);
        assert_eq!(parse("{}", Mode::Pretrain).unwrap().train.mode, Mode::Pretrain);
        let err = parse(r#"{"train": {"mode": "bogus"}}"#, Mode::St).unwrap_err();
        assert!(err.to_string().contains("unknown mode"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(parse(r#"{"trian": {}}"#, Mode::St).is_err());
        assert!(parse(r#"{"train": {"stpes": 3}}"#, Mode::St).is_err());
        assert!(parse(r#"{"train": {"steps": 0}}"#, Mode::St).is_err());
    }
}
