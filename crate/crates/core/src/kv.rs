//! Plain-text `key=value` documents.
//!
//! Used for session metadata, run configs, and checkpoint manifests. Lines
//! starting with `#` and blank lines are ignored. Key order is preserved so
//! that writing a document twice produces identical bytes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(context, format!("line {}: expected key=value", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(context, format!("line {}: empty key", lineno + 1)));
            }
            doc.set(k, v.trim());
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Inserts or replaces `key`, keeping the position of an existing entry.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(key, "missing required key"))
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<V>()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse value `{raw}`"))),
        }
    }

    pub fn require_value<V: FromStr>(&self, key: &str) -> Result<V> {
        self.parse_value(key)?
            .ok_or_else(|| Error::config(key, "missing required key"))
    }

    pub fn parse_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        match self.get(key) {
            None => Ok(None),
            Some("") => Ok(Some(Vec::new())),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<V>()
                        .map_err(|_| Error::config(key, format!("cannot parse list item `{s}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Rejects any key not in `allowed`, naming the first offender.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::config(k, "unknown key"));
            }
        }
        Ok(())
    }
}

pub fn join_list<V: ToString>(values: &[V]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_keeps_order() {
        let doc = KvDoc::parse("# c\nb=2\n\na = 1\n", "t").unwrap();
        assert_eq!(doc.keys().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(doc.require_value::<i32>("a").unwrap(), 1);
        assert_eq!(doc.to_text(), "b=2\na=1\n");
    }

    #[test]
    fn bad_value_names_key() {
        let doc = KvDoc::parse("lr=abc", "t").unwrap();
        let err = doc.require_value::<f64>("lr").unwrap_err();
        assert!(err.to_string().contains("lr"));
        assert!(doc.check_keys(&["epochs"]).unwrap_err().to_string().contains("lr"));
    }

    #[test]
    fn lists() {
        let doc = KvDoc::parse("d=1,2, 4", "t").unwrap();
        assert_eq!(doc.parse_list::<usize>("d").unwrap(), Some(vec![1, 2, 4]));
    }
}
