//! Flat-key config files.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys are dotted
//! paths into the run config (`synth.n_targets`, `train.buffer_policy`).
//! Values are parsed as JSON when possible and taken as bare strings
//! otherwise, so `never`, `top_k` and `{"every_r_steps": 500}` all work.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) if !raw[..i].contains('"') => &raw[..i],
            _ => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_flat_file(path: &Path) -> Result<Vec<(String, String)>> {
    parse_flat(&fs::read_to_string(path)?)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key = value` overrides to `base`. Unknown keys are errors.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T> {
    let mut tree = serde_json::to_value(base)?;
    for (key, raw) in pairs {
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::invalid(format!("unknown config key `{key}`")))?;
        }
        *node = parse_value(raw);
    }
    serde_json::from_value(tree).map_err(|e| Error::invalid(format!("bad config value: {e}")))
}

/// Resolved config as flat `key = value` lines, sorted by key.
pub fn to_flat<T: Serialize>(value: &T) -> Result<String> {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) if !m.is_empty() && !is_enum_variant(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
            other => out.push_str(&format!("{prefix} = {other}\n")),
        }
    }
    // Externally tagged variants such as `{"every_r_steps": 500}` stay whole.
    fn is_enum_variant(m: &serde_json::Map<String, Value>) -> bool {
        m.len() == 1 && m.values().all(|v| !v.is_object())
    }
    let mut out = String::new();
    walk("", &serde_json::to_value(value)?, &mut out);
    Ok(out)
}
