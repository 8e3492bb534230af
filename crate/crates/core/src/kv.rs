//! Plain-text `key=value` manifests.
//!
//! One pair per line, `#` starts a comment, order is preserved. Used for
//! checkpoints, motion representations, dataset manifests and run configs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvFile {
    pairs: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        debug_assert!(!value.contains('\n'), "kv value must be single-line");
        if let Some(slot) = self.pairs.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.pairs.push((key, value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, path: &Path, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::manifest(path, format!("missing key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        let raw = self.require(path, key)?;
        raw.parse().map_err(|_| {
            Error::manifest(path, format!("key {key:?} has unparsable value {raw:?}"))
        })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(path, &text)
    }

    pub fn parse_str(path: &Path, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::manifest(
                    path,
                    format!("line {}: expected key=value, got {line:?}", lineno + 1),
                ));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let mut kv = KvFile::new();
        kv.set("b", 2);
        kv.set("a", "x y");
        kv.set("b", 3); // overwrite keeps position
        kv.write(&path).unwrap();
        let back = KvFile::read(&path).unwrap();
        assert_eq!(back.pairs(), &[("b".into(), "3".into()), ("a".into(), "x y".into())]);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let kv =
            KvFile::parse_str(Path::new("t"), "# header\n\nk=v\n  # note\n").unwrap();
        assert_eq!(kv.get("k"), Some("v"));
        assert_eq!(kv.pairs().len(), 1);
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(KvFile::parse_str(Path::new("t"), "just words\n").is_err());
    }
}
