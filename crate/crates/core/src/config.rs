//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat only
//! if the reader is told so; lists are comma-separated. Every consumer takes
//! the keys it knows and then calls [`KvConfig::finish`], which rejects
//! anything left over.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: IndexMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key`, or returns `default` when absent.
    pub fn take<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{v}': {e}"))),
        }
    }

    pub fn take_opt<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{v}': {e}"))),
        }
    }

    pub fn take_list<V: FromStr>(&mut self, key: &str, default: Vec<V>) -> Result<Vec<V>>
    where
        V::Err: Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{s}': {e}")))
                })
                .collect(),
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }

    /// `key = value` lines in insertion order.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_defaults() {
        let mut c = KvConfig::parse("# demo\nseed = 7\n\nscales = 0.5, 1.0\nname=toy\n").unwrap();
        assert_eq!(c.take("seed", 0u64).unwrap(), 7);
        assert_eq!(c.take("missing", 3usize).unwrap(), 3);
        assert_eq!(c.take_list::<f64>("scales", vec![]).unwrap(), vec![0.5, 1.0]);
        assert_eq!(c.take("name", String::new()).unwrap(), "toy");
        c.finish().unwrap();
    }

    #[test]
    fn rejects_bad_lines_duplicates_and_leftovers() {
        assert!(KvConfig::parse("novalue").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        let mut c = KvConfig::parse("a = x\nb = 1").unwrap();
        assert!(matches!(c.take("a", 0usize), Err(Error::Config(_))));
        assert!(matches!(c.finish(), Err(Error::Config(m)) if m.contains('b')));
    }

    #[test]
    fn render_round_trips() {
        let mut c = KvConfig::default();
        c.set("x", 1.5);
        c.set("y", "a,b");
        assert_eq!(KvConfig::parse(&c.render()).unwrap(), c);
    }
}
