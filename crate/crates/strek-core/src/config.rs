//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key must be consumed by
//! the command that loads the file; leftover keys abort before any work runs.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{}'",
                    lineno + 1,
                    line
                )));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        Ok(Config {
            values,
            consumed: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    /// Override or insert a key (used for command-line flag overrides).
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.consumed.borrow_mut().insert(key.to_string());
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.values
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::Config(format!(
                "key '{key}': cannot parse '{raw}' as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.consumed.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            Some(raw) => self.parsed(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.consumed.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            Some(raw) => self.parsed(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.consumed.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            Some(raw) => self.parsed(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        self.consumed.borrow_mut().insert(key.to_string());
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::Config(format!("key '{key}': expected bool, got '{other}'"))),
        }
    }

    /// Fail if any key present in the file was never consumed.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self.values.keys().filter(|k| !consumed.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = Config::parse("a = 1\n# note\nb = hello # trailing\n\n").unwrap();
        assert_eq!(c.get_usize("a", 0).unwrap(), 1);
        assert_eq!(c.get_str("b", ""), "hello");
        c.finish().unwrap();
    }

    #[test]
    fn unknown_keys_abort() {
        let c = Config::parse("known = 1\nmystery = 2\n").unwrap();
        let _ = c.get_usize("known", 0);
        let err = c.finish().unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("just words\n").is_err());
    }
}
