//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment line, keys are dotted paths
//! such as `weights.lambda4`. Command-line overrides use the same syntax and
//! are applied after the file, so the last assignment of a key wins.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits a config file into entries. Duplicate keys inside one file are
/// rejected; overrides are the place to change a value.
pub fn parse_key_values(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            origin: origin.to_string(),
            line,
            msg,
        };
        let (k, v) = trimmed
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{trimmed}`")))?;
        let key = k.trim();
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(err(format!("malformed key `{key}`")));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Parses one `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<Entry> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::Parse {
        origin: "--set".into(),
        line: 0,
        msg: format!("expected key=value, got `{arg}`"),
    })?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Parse {
            origin: "--set".into(),
            line: 0,
            msg: format!("empty key in `{arg}`"),
        });
    }
    Ok(Entry {
        key: key.to_string(),
        value: v.trim().to_string(),
        line: 0,
    })
}

/// A typed configuration assembled from flat entries.
pub trait Settings: Default + Sized {
    /// Applies one assignment; unknown keys are an [`Error::UnknownKey`].
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in documentation order.
    fn entries(&self) -> Vec<(String, String)>;

    fn validate(&self) -> Result<()> {
        Ok(())
    }

    /// Keys that must be applied before all others regardless of position,
    /// e.g. a preset that other keys refine.
    fn leading_keys() -> &'static [&'static str] {
        &[]
    }

    fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        for lead in Self::leading_keys() {
            if let Some(e) = entries.iter().rev().find(|e| e.key == *lead) {
                cfg.set(&e.key, &e.value)?;
            }
        }
        for e in entries {
            if !Self::leading_keys().contains(&e.key.as_str()) {
                cfg.set(&e.key, &e.value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_text(text: &str, origin: &str) -> Result<Self> {
        Self::from_entries(&parse_key_values(text, origin)?)
    }

    /// File (optional) followed by `--set` overrides.
    fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_key_values(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        Self::from_entries(&entries)
    }

    /// Resolved configuration in the same file format; parsing it back yields
    /// an equal configuration.
    fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::bad_value(key, format!("`{value}`: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::bad_value(key, format!("`{value}` is not a boolean"))),
    }
}

/// Comma separated list; empty entries are dropped.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `f64` formatting that parses back to the identical value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
