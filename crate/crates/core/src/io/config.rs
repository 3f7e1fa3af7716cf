use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::{Error, Result};

/// Loads a JSON or `key = value` config file into `T`.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Parses config text. Text starting with `{` is JSON. Otherwise each
/// non-blank line is `key = value`; `#` starts a comment, dotted keys nest
/// (`fed.rounds = 3`), and values are read as bool, integer, float, or
/// string in that order. A value containing commas becomes a list.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text)?
    } else {
        parse_key_values(text)?
    };
    Ok(serde_json::from_value(value)?)
}

fn parse_key_values(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {}: expected key = value", n + 1))
        })?;
        let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidArgument(format!("line {}: empty key", n + 1)));
        }
        let value = value.trim();
        let parsed = if value.contains(',') {
            Value::Array(value.split(',').map(|v| scalar(v.trim())).collect())
        } else {
            scalar(value)
        };
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry.as_object_mut().ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: {part} is not a section", n + 1))
            })?;
        }
        node.insert(path[path.len() - 1].to_string(), parsed);
    }
    Ok(Value::Object(root))
}

fn scalar(v: &str) -> Value {
    if let Ok(b) = v.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = v.parse::<u64>() {
        return Value::from(i);
    }
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = v.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    Value::String(v.trim_matches('"').to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::FedConfig;

    #[test]
    fn key_value_and_json_agree() {
        let kv: FedConfig =
            parse_config("# comment\nK = 3\nrounds=2 # trailing\neta = 0.001\n").unwrap();
        let js: FedConfig = parse_config(r#"{"clients": 3, "rounds": 2, "lr": 0.001}"#).unwrap();
        assert_eq!(kv, js);
        assert_eq!(kv.local_epochs, FedConfig::default().local_epochs);
    }

    #[test]
    fn nested_keys_and_lists() {
        let v = parse_key_values("a.b = 1\na.c = x, y\n").unwrap();
        assert_eq!(v["a"]["b"], Value::from(1u64));
        assert_eq!(v["a"]["c"], serde_json::json!(["x", "y"]));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(parse_config::<FedConfig>("bogus = 1").is_err());
        assert!(parse_config::<FedConfig>("rounds").is_err());
        assert!(parse_config::<FedConfig>("rounds = many").is_err());
    }
}
