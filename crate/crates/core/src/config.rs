//! `key = value` text format shared by model specs, training configs and
//! checkpoint headers. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs in file order, with duplicate detection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, found '{line}'"),
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{k}'"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed lookup; `None` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Parse {
                line: *line,
                msg: format!("{key}: {e}"),
            }),
        }
    }

    /// Typed lookup with a default.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Errors on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("unknown key '{k}'"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_typed_values() {
        let kv = KeyValues::parse("# c\nwidth = 32\nname=dva # trailing\n\nlr=1e-3\n").unwrap();
        assert_eq!(kv.get::<usize>("width").unwrap(), Some(32));
        assert_eq!(kv.raw("name"), Some("dva"));
        assert_eq!(kv.get_or("lr", 0.0).unwrap(), 1e-3);
        assert_eq!(kv.get_or("missing", 7u32).unwrap(), 7);
        assert!(kv.reject_unknown(&["width", "name"]).is_err());
        assert!(kv.reject_unknown(&["width", "name", "lr"]).is_ok());
    }

    #[test]
    fn errors_carry_lines() {
        assert!(matches!(KeyValues::parse("a=1\nbogus\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a=1\na=2\n"), Err(Error::Parse { line: 2, .. })));
        let kv = KeyValues::parse("\nw = x\n").unwrap();
        assert!(matches!(kv.get::<usize>("w"), Err(Error::Parse { line: 2, .. })));
    }
}
