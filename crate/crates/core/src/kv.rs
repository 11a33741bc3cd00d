//! Plain-text `key = value` files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax { line: n + 1, message: format!("expected key = value, got {line:?}") });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Syntax { line: n + 1, message: "empty key".into() });
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(KvError::Syntax { line: n + 1, message: format!("duplicate key {key:?}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((_, v)) => v.parse().map(Some).map_err(|_| KvError::Value { key: key.into(), value: v.clone() }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), KvError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let kv = KeyValues::parse("# header\na = 1\n b=2.5 # trailing\n\nmode = pl\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.get::<f64>("b").unwrap(), Some(2.5));
        assert_eq!(kv.get::<String>("mode").unwrap().as_deref(), Some("pl"));
        assert_eq!(kv.get::<u32>("missing").unwrap(), None);
        assert!(matches!(kv.get::<u32>("mode"), Err(KvError::Value { .. })));
        assert_eq!(KeyValues::parse("a=1\nnonsense\n"), Err(KvError::Syntax { line: 2, message: "expected key = value, got \"nonsense\"".into() }));
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert_eq!(kv.check_known(&["a", "b"]), Err(KvError::UnknownKey("mode".into())));
    }
}
