//! JSON config files with flat `--key value` overrides.
//!
//! A key names a field anywhere in the config tree: `lr` finds `optim.lr`.
//! Keys that occur in more than one place must be spelled as a dotted path
//! (`matcher.alpha1`). Hyphens and underscores are interchangeable. Values
//! are parsed as JSON when possible and taken as strings otherwise.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{MgtrError, Result};

fn find_paths(v: &Value, key: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            if k == key {
                out.push(prefix.clone());
            }
            find_paths(child, key, prefix, out);
            prefix.pop();
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets one field of `tree`, located by name or dotted path.
pub fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let key = key.trim_start_matches('-').replace('-', "_");
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        let mut found = Vec::new();
        find_paths(tree, &key, &mut Vec::new(), &mut found);
        match found.len() {
            0 => return Err(MgtrError::Config(format!("unknown option --{key}"))),
            1 => found.remove(0),
            _ => {
                let names: Vec<String> = found.iter().map(|p| p.join(".")).collect();
                return Err(MgtrError::Config(format!(
                    "--{key} is ambiguous; use one of --{}",
                    names.join(", --")
                )));
            }
        }
    };
    let mut node = tree;
    for (i, part) in path.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(MgtrError::Config(format!("--{key}: {} is not a section", path[..i].join("."))));
        };
        node = map
            .get_mut(part)
            .ok_or_else(|| MgtrError::Config(format!("unknown option --{}", path[..=i].join("."))))?;
    }
    *node = parse_value(raw);
    Ok(())
}

/// Defaults, then the JSON file (if any), then the overrides in order.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: T,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<T> {
    let mut tree = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let from_file: Value = serde_json::from_str(&text)?;
        merge(&mut tree, from_file);
    }
    for (k, v) in overrides {
        apply_override(&mut tree, k, v)?;
    }
    serde_json::from_value(tree).map_err(|e| MgtrError::Config(e.to_string()))
}

/// Recursively overlays `patch` on `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // tagged enums are replaced wholesale so stale fields of another variant don't linger
                    Some(slot) if slot.is_object() && v.is_object() && !v.as_object().unwrap().contains_key("kind") => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Splits `--key value` pairs; a `--key` followed by another flag or the end
/// is read as `true`.
pub fn pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(key) = a.strip_prefix("--") else {
            return Err(MgtrError::Config(format!("expected --key, found {a:?}")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((key.to_string(), args[i + 1].clone()));
            i += 2;
        } else {
            out.push((key.to_string(), "true".to_string()));
            i += 1;
        }
    }
    Ok(out)
}
