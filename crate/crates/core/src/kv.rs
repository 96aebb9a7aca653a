//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys must be unique.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config file", format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::format("config file", format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present, leaving `slot` untouched otherwise.
    pub fn read<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.entries.get(key) {
            *slot = v.parse().map_err(|e| Error::format("config file", format!("{key} = {v}: {e}")))?;
        }
        Ok(())
    }

    /// Fails on any key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::format("config file", format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &KvFile) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_read() {
        let kv = KvFile::parse("# run\nepochs = 5\n\nlr=1e-4 # net\n").unwrap();
        let (mut e, mut lr) = (0usize, 0.0f64);
        kv.read("epochs", &mut e).unwrap();
        kv.read("lr", &mut lr).unwrap();
        assert_eq!((e, lr), (5, 1e-4));
        assert!(kv.check_keys(&["epochs"]).is_err());
        assert_eq!(KvFile::parse(&kv.to_text()).unwrap(), kv);
        assert!(KvFile::parse("a = 1\na = 2").is_err());
        assert!(KvFile::parse("novalue").is_err());
        assert!(kv.read("epochs", &mut 0.5f32).is_ok());
        assert!(kv.read("lr", &mut 0u8).is_err());
    }
}
