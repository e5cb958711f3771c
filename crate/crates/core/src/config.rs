//! Flat `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; values may be wrapped in double
//! quotes; blank lines are ignored. Keys are case-sensitive and may not repeat.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config {
                    line: line_no,
                    detail: format!("invalid key `{key}`"),
                });
            }
            let value = unquote(value.trim()).ok_or_else(|| Error::Config {
                line: line_no,
                detail: "unterminated quote".into(),
            })?;
            if entries
                .insert(key.to_string(), (line_no, value.to_string()))
                .is_some()
            {
                return Err(Error::Config {
                    line: line_no,
                    detail: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KvFile { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    /// Parse `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line: self.line(key),
                detail: format!("`{key}`: {e}"),
            }),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some("true" | "1" | "yes" | "on") => Ok(Some(true)),
            Some("false" | "0" | "no" | "off") => Ok(Some(false)),
            Some(v) => Err(Error::Config {
                line: self.line(key),
                detail: format!("`{key}`: expected a boolean, got `{v}`"),
            }),
        }
    }

    /// Comma-separated list, e.g. `40, 70`.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|e| Error::Config {
                    line: self.line(key),
                    detail: format!("`{key}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Error on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (line, _))) => Err(Error::Config {
                line: *line,
                detail: format!("unknown key `{k}`"),
            }),
            None => Ok(()),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> Option<&str> {
    match v.strip_prefix('"') {
        Some(rest) => rest.strip_suffix('"'),
        None if v.ends_with('"') => None,
        None => Some(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_lists() {
        let kv = KvFile::parse("# header\nlr = 3.5e-4  # initial\nname = \"a # b\"\ndecay = 40, 70\nflag=on\n").unwrap();
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(3.5e-4));
        assert_eq!(kv.raw("name"), Some("a # b"));
        assert_eq!(kv.get_list::<usize>("decay").unwrap(), Some(vec![40, 70]));
        assert_eq!(kv.get_bool("flag").unwrap(), Some(true));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvFile::parse("novalue\n").is_err());
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
        assert!(KvFile::parse("bad key = 1\n").is_err());
        assert!(KvFile::parse("a = \"open\n").is_err());
        let kv = KvFile::parse("epochs = ten\n").unwrap();
        assert!(matches!(kv.get::<usize>("epochs"), Err(Error::Config { line: 1, .. })));
        assert!(kv.reject_unknown(&["lr"]).is_err());
    }
}
