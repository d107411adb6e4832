//! Layered configuration: built-in defaults, then a JSON or TOML file, then
//! `--set key=value` overrides addressed by dotted paths.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        merge(&mut value, read_file(path)?);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{s}`")))?;
        set_path(&mut value, key.trim(), parse_scalar(raw))?;
    }
    serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))
}

fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = handtraj::io::read_to_string(path).map_err(CliError::input)?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str::<Value>(&text).map_err(|e| e.to_string()),
        _ => serde_json::from_str::<Value>(&text).map_err(|e| e.to_string()),
    };
    parsed.map_err(|m| CliError::config(format!("{}: {m}", path.display())).with_path(path))
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// JSON if it parses, a bare string otherwise.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    if key.is_empty() {
        return Err(CliError::config("--set needs a non-empty key"));
    }
    let mut cur = root;
    for seg in key.split('.') {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| CliError::config(format!("`{key}`: `{seg}` is not an array index")))?;
                let n = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::config(format!("`{key}`: index {i} out of range ({n} items)")))?
            }
            _ => return Err(CliError::config(format!("`{key}`: `{seg}` is inside a scalar"))),
        };
    }
    *cur = v;
    Ok(())
}

/// Hex SHA-256 of the canonical JSON form.
pub fn hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
