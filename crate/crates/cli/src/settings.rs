//! Key=value run settings: file values, command-line overrides, and a record
//! of every value actually resolved.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::UsageError;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key=value, got '{raw}'", n + 1)))?;
        let key = normalize_key(k.trim());
        if key.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", n + 1)).into());
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from a config file when one is given.
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let mut s = Self::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            s.values = parse_key_values(&text)?;
        }
        Ok(s)
    }

    /// Command-line value; takes precedence over the file.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.values.insert(normalize_key(key), v.to_string());
        }
    }

    /// Records a value that is not read from the settings (e.g. a
    /// positional argument) so it appears in the resolved config.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(normalize_key(key), value.to_string());
    }

    /// Values given on the command line are recorded as written; defaults
    /// use their display form.
    fn take(&mut self, key: &str) -> Option<String> {
        let key = normalize_key(key);
        self.consumed.insert(key.clone());
        self.values.get(&key).cloned()
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
    where
        T::Err: Display,
    {
        raw.parse::<T>()
            .map_err(|e| UsageError(format!("invalid value '{raw}' for {key}: {e}")).into())
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.take(key) {
            Some(raw) => {
                let v = Self::parse(key, raw.trim())?;
                self.record(key, raw.trim());
                Ok(v)
            }
            None => {
                self.record(key, &default);
                Ok(default)
            }
        }
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.take(key) {
            Some(raw) => {
                let v: T = Self::parse(key, raw.trim())?;
                self.record(key, raw.trim());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(key)?
            .ok_or_else(|| UsageError(format!("missing required setting --{}", key.replace('_', "-"))).into())
    }

    pub fn require_path(&mut self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require::<String>(key)?))
    }

    pub fn optional_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.optional::<String>(key)?.map(PathBuf::from))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr + Display + Clone>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let v = match self.take(key) {
            Some(raw) => raw
                .split(',')
                .map(|p| p.trim())
                .filter(|p| !p.is_empty())
                .map(|p| Self::parse(key, p))
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        let text = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        self.record(key, text);
        Ok(v)
    }

    /// Fails on file keys that the command never read.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(UsageError(format!("unknown setting(s): {}", unknown.join(", "))).into())
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    pub fn resolved_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
