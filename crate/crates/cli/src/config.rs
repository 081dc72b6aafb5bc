//! Loading a subcommand's JSON config and applying flag overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::Failure;

/// Reads the config file (an empty object when absent) and applies the
/// `--set` overrides, then `--seed` as the top-level `seed` key.
pub fn load_value(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Value, Failure> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Io(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(Failure::Invalid("config must be a JSON object".into()));
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set_dotted(&mut root, key, parse_value(raw))?;
    }
    if let Some(seed) = seed {
        root["seed"] = Value::from(seed);
    }
    Ok(root)
}

pub fn parse<T: DeserializeOwned>(value: Value) -> Result<T, Failure> {
    serde_json::from_value(value).map_err(|e| Failure::Invalid(format!("config: {e}")))
}

/// JSON if it parses as JSON; otherwise a comma-separated list becomes an
/// array and anything else a string.
fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Invalid(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::Invalid(format!("override {key:?} descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Failure::Invalid(format!("override {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_overrides() {
        let v = load_value(
            None,
            &[
                "metrics.selection=ARI,MSE".into(),
                "train.lr=0.01".into(),
                "name=abc".into(),
                "flags=[1,2]".into(),
            ],
            Some(7),
        )
        .unwrap();
        assert_eq!(
            v,
            json!({"metrics": {"selection": ["ARI", "MSE"]}, "train": {"lr": 0.01}, "name": "abc", "flags": [1, 2], "seed": 7})
        );
    }

    #[test]
    fn bad_overrides() {
        assert!(matches!(load_value(None, &["novalue".into()], None), Err(Failure::Invalid(_))));
        assert!(matches!(load_value(None, &["a..b=1".into()], None), Err(Failure::Invalid(_))));
        assert!(matches!(
            load_value(None, &["a=1".into(), "a.b=2".into()], None),
            Err(Failure::Invalid(_))
        ));
    }
}
