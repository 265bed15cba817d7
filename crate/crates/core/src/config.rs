//! Flat `key=value` configuration text shared by every subcommand.
//!
//! Lines are `key=value`; blank lines and text after `#` are ignored.
//! Spatial triples (`input`, `dims`, `spacing`) are written in x,y,z order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                detail: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    key: format!("line {}", lineno + 1),
                    detail: "empty key".into(),
                });
            }
            if cfg.entries.contains_key(key) {
                return Err(Error::Config {
                    key: key.into(),
                    detail: "duplicate key".into(),
                });
            }
            cfg.entries
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a single `key=value` override.
    pub fn parse_assignment(s: &str) -> Result<(String, String)> {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
            key: s.into(),
            detail: "expected key=value".into(),
        })?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Entries of `other` replace entries of `self`.
    pub fn overlay(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get_raw(key).map(|v| parse_value(key, v)).transpose()
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        self.get_raw(key).map(|v| parse_list(key, v)).transpose()
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config {
                key: k.into(),
                detail: "unknown key".into(),
            }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| Error::Config {
        key: key.into(),
        detail: format!("cannot parse {v:?}: {e}"),
    })
}

pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').map(|item| parse_value(key, item)).collect()
}

/// Parses an x,y,z triple and returns it in (z, y, x) order.
pub fn parse_xyz<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = parse_list(key, v)?;
    match items.as_slice() {
        [x, y, z] => Ok([*z, *y, *x]),
        _ => Err(Error::Config {
            key: key.into(),
            detail: format!("expected three comma-separated values (x,y,z), got {v:?}"),
        }),
    }
}

/// Formats a (z, y, x) triple as `x,y,z`.
pub fn format_xyz<T: fmt::Display>(zyx: &[T; 3]) -> String {
    format!("{},{},{}", zyx[2], zyx[1], zyx[0])
}

pub fn format_list<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
