//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys are
//! the long CLI flag names without the leading dashes (`group-size`, `fp16-params`);
//! underscores are accepted as dashes. Later [`KvConfig::set`] calls override
//! file values, which is how command-line flags take precedence.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::baselines::GptqConfig;
use crate::error::{Error, Result};
use crate::types::{ParamPrecision, QuantSpec};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("config line {}: expected `key = value`", lineno + 1)))?;
            let key = normalize_key(key);
            if key.is_empty() {
                return Err(Error::Invalid(format!("config line {}: empty key", lineno + 1)));
            }
            if cfg.entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Invalid(format!("config line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(normalize_key(key), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize_key(key)).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Invalid(format!("bad value `{v}` for `{key}`"))))
            .transpose()
    }

    /// `true/false`, `1/0`, `yes/no`.
    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Invalid(format!("bad boolean `{v}` for `{key}`"))),
            })
            .transpose()
    }

    /// Comma-separated list, e.g. `dims = 64,64,32`.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse::<T>()
                            .map_err(|_| Error::Invalid(format!("bad list item `{item}` for `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Rejects keys outside `known`, catching typos in config files.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Invalid(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Defaults overridden by `bits`, `group-size`, `iters`, `lambda`,
    /// `alpha`, `s-floor` and `fp16-params`; validated.
    pub fn quant_spec(&self) -> Result<QuantSpec> {
        let mut spec = QuantSpec::default();
        if let Some(v) = self.get_parsed("bits")? {
            spec.bits = v;
        }
        if let Some(v) = self.get_parsed("group-size")? {
            spec.group_size = v;
        }
        if let Some(v) = self.get_parsed("iters")? {
            spec.iters = v;
        }
        if let Some(v) = self.get_parsed("lambda")? {
            spec.lambda = v;
        }
        if let Some(v) = self.get_parsed("alpha")? {
            spec.alpha = v;
        }
        if let Some(v) = self.get_parsed("s-floor")? {
            spec.s_floor = v;
        }
        if let Some(fp16) = self.get_bool("fp16-params")? {
            spec.param_precision = if fp16 { ParamPrecision::F16 } else { ParamPrecision::F32 };
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Defaults overridden by `block-size` and `damp-ratio`; validated.
    pub fn gptq_config(&self) -> Result<GptqConfig> {
        let mut cfg = GptqConfig::default();
        if let Some(v) = self.get_parsed("block-size")? {
            cfg.block_size = v;
        }
        if let Some(v) = self.get_parsed("damp-ratio")? {
            cfg.damp_ratio = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
