//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. A key may repeat; the
//! last occurrence wins. Consumers take the keys they know and then call
//! [`FlatConfig::finish`], which rejects anything left over.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, (usize, String)>,
    source: String,
}

impl FlatConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{source}:{}: expected `key = value`, got `{line}`",
                    i + 1
                )));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{}: empty key", i + 1)));
            }
            entries.insert(key.to_string(), (i + 1, v.trim().to_string()));
        }
        Ok(Self {
            entries,
            source: source.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some((line, raw)) = self.entries.remove(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|_| {
            Error::Config(format!(
                "{}:{line}: cannot parse value `{raw}` for key `{key}`",
                self.source
            ))
        })
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Config(format!(
                "{}:{line}: unknown key `{key}`",
                self.source
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_keys_override() {
        let mut c = FlatConfig::parse("# c\nlr = 0.1\n\nsteps=5\nlr = 0.2\n", "t").unwrap();
        assert_eq!(c.take::<f64>("lr").unwrap(), Some(0.2));
        assert_eq!(c.take::<usize>("steps").unwrap(), Some(5));
        assert_eq!(c.take::<usize>("steps").unwrap(), None);
        c.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = FlatConfig::parse("lr = 1\nbogus = 2\n", "f.cfg").unwrap();
        let mut lr = 0.0;
        c.take_into("lr", &mut lr).unwrap();
        assert_eq!(lr, 1.0);
        let err = c.finish().unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("f.cfg:2"), "{err}");
    }

    #[test]
    fn malformed_lines_and_values() {
        assert!(FlatConfig::parse("novalue\n", "t").is_err());
        assert!(FlatConfig::parse(" = 3\n", "t").is_err());
        let mut c = FlatConfig::parse("steps = many\n", "t").unwrap();
        let err = c.take::<usize>("steps").unwrap_err().to_string();
        assert!(err.contains("steps") && err.contains("many"), "{err}");
    }
}
