//! TOML config files with `key.path=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Value;

use dtinet::{Error, Result};

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn set_path(root: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("bad config key '{key}'")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::InvalidArgument(format!("config key '{key}': '{p}' is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `key=value` strings in order.
pub fn apply_overrides(root: &mut toml::Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override '{s}' is not of the form key=value")))?;
        set_path(root, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

/// Loads `path` (if any), applies overrides and deserializes; unspecified
/// keys take their defaults.
pub fn load<T: DeserializeOwned + Serialize>(path: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            text.parse::<toml::Table>().map_err(|e| Error::Malformed {
                path: p.to_path_buf(),
                reason: e.to_string().trim().replace('\n', " "),
            })?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut root, sets)?;
    T::deserialize(Value::Table(root)).map_err(|e| Error::InvalidArgument(format!("config: {}", e.to_string().trim().replace('\n', " "))))
}
