//! Flat key-value run configuration.
//!
//! Config files are plain text with dotted keys (`invert.steps = 2000`,
//! comments with `#`). CLI flags override file values; the fully resolved
//! map is what gets digested and written into run manifests, so two runs
//! with the same digest saw exactly the same effective configuration.

use crate::util::sha256_hex;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {} is not 'key = value': {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("config line {} has an empty key", lineno + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key '{key}' has unparseable value {raw:?}"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Stable digest of the canonical form.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

/// Resolve one setting: CLI flag wins, then config file, then the default.
pub fn pick<T: FromStr + Display + Clone>(
    flag: Option<T>,
    cfg: &Config,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg.get_parsed::<T>(key)?.unwrap_or(default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_digest_are_order_independent() {
        let a = Config::parse("b.x = 2\na.y = 1 # comment\n\n# full comment\n").unwrap();
        let b = Config::parse("a.y = 1\nb.x = 2").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.get("a.y"), Some("1"));
        assert_eq!(a.get_parsed::<u32>("b.x").unwrap(), Some(2));
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("= 3").is_err());
        let cfg = Config::parse("k = notanumber").unwrap();
        assert!(cfg.get_parsed::<f64>("k").is_err());
    }

    #[test]
    fn flags_beat_file_beats_default() {
        let cfg = Config::parse("invert.steps = 500").unwrap();
        assert_eq!(pick(Some(9usize), &cfg, "invert.steps", 100).unwrap(), 9);
        assert_eq!(pick::<usize>(None, &cfg, "invert.steps", 100).unwrap(), 500);
        assert_eq!(pick::<usize>(None, &cfg, "invert.missing", 100).unwrap(), 100);
    }
}
