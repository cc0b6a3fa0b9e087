//! Run configuration files.
//!
//! A config is a TOML document with four optional sections:
//!
//! ```toml
//! [model]    # ModelConfig: arch, input, classes, hidden, channels, precision, ...
//! [trainer]  # RunConfig: epochs, lr0, momentum, batch_size, seed, grad_scale, ...
//! [data]     # DataConfig: source, train_size, test_size, seed, file paths
//! [run]      # name, out_dir, init_from, teacher, model_seed
//! ```
//!
//! Unknown keys anywhere are errors. Single keys can be overridden with
//! `section.key=value` strings, where the value is parsed as a TOML value
//! and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::fsio;
use crate::nn::ModelConfig;
use crate::train::RunConfig;

/// Environment variable that replaces `run.out_dir`.
pub const OUT_ENV: &str = "LSQ_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Subdirectory of the output root for this run's artifacts.
    pub name: String,
    pub out_dir: PathBuf,
    /// Full precision checkpoint to initialise from.
    pub init_from: Option<PathBuf>,
    /// Teacher checkpoint for distillation.
    pub teacher: Option<PathBuf>,
    /// Seed for weight initialisation.
    pub model_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "run".into(),
            out_dir: PathBuf::from("out"),
            init_from: None,
            teacher: None,
            model_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub trainer: RunConfig,
    pub data: DataConfig,
    pub run: RunSection,
}

impl Config {
    /// Parse `text`, apply `overrides` in order and validate.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        if !overrides.is_empty() {
            let mut table = match toml::Value::try_from(&cfg) {
                Ok(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config("config does not serialize to a table".into())),
            };
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            cfg = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let bytes = fsio::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        Config::parse(&text, &path.display().to_string(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run.name '{}' must be a plain directory name", self.run.name)));
        }
        Ok(())
    }

    /// 16 hex chars identifying everything that affects results; output
    /// locations and the run name are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.name.clear();
        c.run.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `$LSQ_OUT` if set, otherwise `run.out_dir`.
    pub fn output_root(&self) -> PathBuf {
        output_root(&self.run.out_dir)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.run.name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn output_root(fallback: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

/// Set `a.b.c=value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{spec}' is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override '{spec}' has an empty key segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{spec}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(Config::parse("", "t", &[]).unwrap(), Config::default());
    }

    #[test]
    fn sections_and_overrides() {
        let text = "[model]\nprecision = 2\nhidden = [32]\n[trainer]\nepochs = 3\n[run]\nname = \"w2\"\n";
        let cfg = Config::parse(text, "t", &["trainer.lr0=0.001".into(), "data.source=blobs".into()]).unwrap();
        assert_eq!(cfg.model.precision, 2);
        assert_eq!(cfg.model.hidden, vec![32]);
        assert_eq!(cfg.trainer.epochs, Some(3));
        assert_eq!(cfg.trainer.lr0, Some(0.001));
        assert_eq!(cfg.data.source, crate::data::DataSource::Blobs);
        assert_eq!(cfg.run.name, "w2");
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = Config::parse("[trainer]\nepochs = 1\nlearning_rate = 0.1\n", "cfg.toml", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("line 3") && msg.contains("learning_rate"), "{msg}");
        assert!(Config::parse("[extra]\n", "t", &[]).is_err());
        let err = Config::parse("", "t", &["trainer.typo=1".into()]).unwrap_err();
        assert!(err.to_string().contains("typo"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::parse("[model]\nprecision = 5\n", "t", &[]).is_err());
        assert!(Config::parse("", "t", &["trainer.batch_size=0".into()]).is_err());
        assert!(Config::parse("", "t", &["run.name=a/b".into()]).is_err());
        assert!(matches!(Config::parse("", "t", &["novalue".into()]), Err(Error::Usage(_))));
        assert!(Config::parse("", "t", &["trainer.epochs.x=1".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = Config::default();
        let mut b = a.clone();
        b.run.out_dir = "elsewhere".into();
        b.run.name = "other".into();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.trainer.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::parse("", "t", &["model.precision=3".into(), "trainer.lr0=0.02".into()]).unwrap();
        assert_eq!(Config::parse(&cfg.to_toml().unwrap(), "t", &[]).unwrap(), cfg);
    }
}
