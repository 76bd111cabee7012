//! Config files plus `--set key=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use wali_morph::Error;

fn parse_file(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
    let v: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?,
        _ => serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?,
    };
    if !v.is_object() {
        anyhow::bail!("config {}: top level must be a table", path.display());
    }
    Ok(v)
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            anyhow::bail!("bad override key `{key}`");
        }
        if !cur.is_object() {
            return Err(Error::config(parts[..i].join("."), "is not a table").into());
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// `key=value` where the value is parsed as JSON and otherwise kept as a string.
pub fn parse_override(s: &str) -> anyhow::Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow::anyhow!("override `{s}` is not of the form key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn load<T: DeserializeOwned>(file: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<T> {
    let mut root = match file {
        Some(p) => parse_file(p)?,
        None => Value::Object(Map::new()),
    };
    for (k, v) in overrides {
        set_path(&mut root, k, v.clone())?;
    }
    serde_path_to_error::deserialize(root).map_err(|e| {
        let field = e.path().to_string();
        Error::config(field, e.inner().to_string()).into()
    })
}
