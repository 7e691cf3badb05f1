//! Flat `key = value` configuration files and option resolution.
//!
//! A value is taken from the command line (or its environment variable) when
//! present, then from the configuration file, then from the built-in default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    /// Blank lines and lines starting with `#` are skipped. Keys may use
    /// dashes or underscores; a repeated key keeps its last value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return usage(format!("config line {}: expected key = value, got {line:?}", no + 1));
            };
            let key = normalize(k);
            if key.is_empty() {
                return usage(format!("config line {}: empty key", no + 1));
            }
            entries.insert(key, v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(&normalize(key)) {
            None => Ok(None),
            Some(raw) => match raw.parse() {
                Ok(v) => Ok(Some(v)),
                Err(e) => usage(format!("config key {key}: cannot parse {raw:?}: {e}")),
            },
        }
    }

    /// Flag, else file, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    /// Flag, else file.
    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// A switch is on if given on the command line or set true in the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Usage(format!("{what}: cannot parse {s:?}: {e}")).into()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_both_key_styles() {
        let c = ConfigFile::parse("# run\nn = 500\n\ngrid_size=8\nmethod = gem\nn=600\n").unwrap();
        assert_eq!(c.get::<usize>("n").unwrap(), Some(600));
        assert_eq!(c.get::<usize>("grid-size").unwrap(), Some(8));
        assert_eq!(c.get::<String>("method").unwrap().as_deref(), Some("gem"));
        assert_eq!(c.get::<f64>("sigma").unwrap(), None);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let c = ConfigFile::parse("n = 500").unwrap();
        assert_eq!(c.pick(Some(7), "n", 1).unwrap(), 7);
        assert_eq!(c.pick(None, "n", 1).unwrap(), 500);
        assert_eq!(c.pick(None, "reps", 1).unwrap(), 1);
        assert!(c.switch(false, "cv-sigma").is_ok_and(|on| !on));
    }

    #[test]
    fn malformed_input_is_a_usage_error() {
        let err = ConfigFile::parse("n 500").unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
        let c = ConfigFile::parse("n = lots").unwrap();
        assert!(c.get::<usize>("n").unwrap_err().downcast_ref::<Usage>().is_some());
        assert_eq!(parse_list::<f64>("0.1, 0.2,", "sigmas").unwrap(), vec![0.1, 0.2]);
        assert!(parse_list::<f64>("0.1,x", "sigmas").is_err());
    }
}
