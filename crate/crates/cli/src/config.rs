//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fcdd::{FcddError, Result};

pub const SEED_ENV: &str = "FCDD_SEED";

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn config_error(msg: String) -> FcddError {
    FcddError::Config(msg)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_error(format!("config line {}: expected key = value", i + 1)))?;
            let key = k.trim().to_string();
            if cfg.values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(config_error(format!("config line {}: duplicate key '{key}'", i + 1)));
            }
        }
        Ok(cfg)
    }

    /// Reads an optional config file, applies `--set` overrides, then the
    /// seed environment variable.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&fs::read_to_string(p).map_err(|e| FcddError::io(p, e))?)?,
            None => Self::default(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_error(format!("--set expects key=value, got '{s}'")))?;
            cfg.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.values.insert("seed".into(), seed);
        }
        Ok(cfg)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(config_error(format!("unknown config key(s): {}", unknown.join(", "))))
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| config_error(format!("missing required key '{key}'")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_error(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| config_error(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(config_error(format!("key '{key}': expected true or false, got '{v}'"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        match self.get(key) {
            None | Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| config_error(format!("key '{key}': cannot parse '{p}'")))
                })
                .collect(),
        }
    }

    /// A path that must exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let p = PathBuf::from(self.require(key)?);
        if !p.exists() {
            return Err(config_error(format!("key '{key}': path '{}' does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn optional_existing_path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.existing_path(key).map(Some),
        }
    }
}
