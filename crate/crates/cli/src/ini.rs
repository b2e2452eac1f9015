//! Flat `key = value` files with `[section]` headers and `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct Ini {
    /// `section.key` (or bare `key` before any section) to value and line.
    entries: BTreeMap<String, (String, usize)>,
    /// Keys of each section in file order.
    order: BTreeMap<String, Vec<String>>,
    source: String,
}

impl Ini {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut ini = Ini {
            source: source.to_string(),
            ..Default::default()
        };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("{source}:{line_no}: unterminated section header `{line}`"))?
                    .trim();
                if name.is_empty() {
                    return Err(anyhow!("{source}:{line_no}: empty section name"));
                }
                section = name.to_string();
                ini.order.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{source}:{line_no}: expected `key = value`, found `{line}`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(anyhow!("{source}:{line_no}: missing key"));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some((_, first)) = ini.entries.get(&full) {
                return Err(anyhow!("{source}:{line_no}: `{full}` already set on line {first}"));
            }
            ini.entries.insert(full, (value.trim().to_string(), line_no));
            ini.order.entry(section.clone()).or_default().push(key.to_string());
        }
        Ok(ini)
    }

    pub fn raw(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    /// Parses `key` if present, reporting the line of a bad value.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("{}:{line}: bad value for `{key}`: {e}", self.source)),
        }
    }

    /// `(key, value, line)` for every entry of `section` in file order.
    pub fn section(&self, section: &str) -> Vec<(&str, &str, usize)> {
        self.order
            .get(section)
            .map(|keys| {
                keys.iter()
                    .map(|k| {
                        let (v, l) = &self.entries[&format!("{section}.{k}")];
                        (k.as_str(), v.as_str(), *l)
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_lines() {
        let ini = Ini::parse("top = 1\n# note\n[a]\nx = 2 # trailing\n\n[b]\ny=hello\n", "t").unwrap();
        assert_eq!(ini.get::<u32>("top").unwrap(), Some(1));
        assert_eq!(ini.raw("a.x"), Some(("2", 4)));
        assert_eq!(ini.section("b"), vec![("y", "hello", 7)]);
        let err = ini.get::<u32>("b.y").unwrap_err().to_string();
        assert!(err.starts_with("t:7:"), "{err}");
    }

    #[test]
    fn malformed() {
        for (text, line) in [("[a\n", 1), ("x = 1\nnonsense\n", 2), ("x=1\nx=2\n", 2), ("= 3\n", 1)] {
            let err = Ini::parse(text, "f").unwrap_err().to_string();
            assert!(err.starts_with(&format!("f:{line}:")), "{err}");
        }
    }
}
