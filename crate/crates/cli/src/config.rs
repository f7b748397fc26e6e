//! Line-oriented `key = value` config files with `[section]` headers, and
//! the resolver that merges them with command-line flags.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use anyhow::Context;

/// Bad flag or config value; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Parsed file: `section.key -> value`. Keys before any header go to `common`.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = "common".to_string();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return usage(format!("config line {}: unterminated section header", n + 1));
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return usage(format!("config line {}: expected key = value", n + 1));
            };
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                return usage(format!("config line {}: empty key", n + 1));
            }
            values.insert(format!("{section}.{key}"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }
}

/// Resolves each setting as flag, then `[section]` in the file, then
/// `[common]`, then the default, and records every resolved value.
pub struct Resolver {
    section: String,
    file: ConfigFile,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(section: &str, file: ConfigFile) -> Self {
        Self { section: section.to_string(), file, resolved: Vec::new() }
    }

    fn lookup(&self, key: &str) -> Option<&String> {
        self.file.values.get(&format!("{}.{key}", self.section)).or_else(|| self.file.values.get(&format!("common.{key}")))
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.lookup(key) {
                Some(s) => s.parse::<T>().map_err(|e| UsageError(format!("config key {key} = {s:?}: {e}")))?,
                None => default,
            },
        };
        self.record(key, &v);
        Ok(v)
    }

    /// Comma-separated list.
    pub fn list<T>(&mut self, key: &str, flag: Option<String>, default: &str) -> anyhow::Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.get(key, flag, default.to_string())?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| UsageError(format!("{key}: {s:?}: {e}")).into()))
            .collect()
    }

    pub fn record(&mut self, key: &str, value: &impl Display) {
        self.resolved.retain(|(k, _)| k != key);
        self.resolved.push((key.to_string(), value.to_string()));
    }

    pub fn resolved(&self) -> &[(String, String)] {
        &self.resolved
    }

    /// The resolved settings in the file format, under this section.
    pub fn to_text(&self) -> String {
        let mut s = format!("[{}]\n", self.section);
        for (k, v) in &self.resolved {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_precedence() {
        let f = ConfigFile::parse("seed = 4\n# note\n[train]\nepochs = 7 # inline\nbatch-size=16\n").unwrap();
        let mut r = Resolver::new("train", f);
        assert_eq!(r.get("seed", None, 0u64).unwrap(), 4);
        assert_eq!(r.get("epochs", None, 20usize).unwrap(), 7);
        assert_eq!(r.get("epochs", Some(3usize), 20).unwrap(), 3);
        assert_eq!(r.get("batch_size", None, 128usize).unwrap(), 16);
        assert_eq!(r.get("lr", None, 0.05f64).unwrap(), 0.05);
        assert_eq!(r.to_text(), "[train]\nseed = 4\nepochs = 3\nbatch_size = 16\nlr = 0.05\n");
    }

    #[test]
    fn bad_lines_are_usage_errors() {
        assert!(ConfigFile::parse("[train\n").unwrap_err().is::<UsageError>());
        assert!(ConfigFile::parse("just words\n").unwrap_err().is::<UsageError>());
        let mut r = Resolver::new("x", ConfigFile::parse("n = many").unwrap());
        assert!(r.get("n", None, 1usize).unwrap_err().is::<UsageError>());
    }

    #[test]
    fn lists() {
        let mut r = Resolver::new("rfsim", ConfigFile::default());
        assert_eq!(r.list::<usize>("depths", None, "3, 5,7").unwrap(), vec![3, 5, 7]);
        assert!(r.list::<usize>("depths", Some("3,x".into()), "").is_err());
    }
}
