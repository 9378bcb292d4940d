//! `key = value` settings files. Keys are long flag names; flags given on
//! the command line win over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "workers",
    "seed",
    "colorspace",
    "block-log2",
    "model",
    "bits",
    "strategy",
    "epochs",
    "epoch-len",
    "batch-size",
    "lr",
    "channels",
    "o-res-blocks",
    "c-res-blocks",
    "k-first",
    "synthetic",
];

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            let k = k.trim().replace('_', "-");
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key {k:?}", n + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// The flag value if given, else the file's, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_precedence() {
        let c = ConfigFile::parse("# settings\nworkers = 3\nblock_log2=4  # side 16\n\n").unwrap();
        assert_eq!(c.get(None, "workers", 8usize).unwrap(), 3);
        assert_eq!(c.get(Some(5), "workers", 8usize).unwrap(), 5);
        assert_eq!(c.get(None, "block-log2", 6u8).unwrap(), 4);
        assert_eq!(c.get(None, "seed", 9u64).unwrap(), 9);
    }

    #[test]
    fn bad_lines() {
        assert!(matches!(ConfigFile::parse("nonsense"), Err(CliError::Usage(_))));
        assert!(matches!(ConfigFile::parse("colour = rgb"), Err(CliError::Usage(_))));
        let c = ConfigFile::parse("workers = many").unwrap();
        assert!(c.get(None, "workers", 1usize).is_err());
    }
}
