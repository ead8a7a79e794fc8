//! Config file loading and command-line overrides.

use std::path::PathBuf;

use serde_json::Value;
use surroflow::pipeline::RunConfig;
use surroflow::{Error, Result};

use crate::Common;

/// Sets `path` (dot-separated) in a JSON object, creating parents.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Usage(format!("malformed config key {path:?}")));
    }
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("config key {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry(*key).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text.split_once('=').ok_or_else(|| Error::Usage(format!("expected KEY=VALUE, got {text:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Config file, then `--set` assignments, then subcommand flags, then `--seed`.
pub fn effective_config(common: &Common, flags: &[(&str, Value)]) -> Result<(RunConfig, PathBuf)> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", common.config.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { record: common.config.display().to_string(), message: e.to_string() })?;
    if !doc.is_object() {
        return Err(Error::Validation("config must be a JSON object".into()));
    }
    for s in &common.set {
        let (key, value) = parse_assignment(s)?;
        set_path(&mut doc, &key, value)?;
    }
    for (key, value) in flags {
        set_path(&mut doc, key, value.clone())?;
    }
    if let Some(seed) = common.seed {
        set_path(&mut doc, "seed", seed.into())?;
    }
    let config = RunConfig::from_json(&doc.to_string())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    Ok((config, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_set_creates_parents() {
        let mut doc = json!({"model": {"hidden_dim": 8}});
        set_path(&mut doc, "model.patience", json!(3)).unwrap();
        set_path(&mut doc, "network.grid_size", json!(5)).unwrap();
        assert_eq!(doc, json!({"model": {"hidden_dim": 8, "patience": 3}, "network": {"grid_size": 5}}));
        assert!(set_path(&mut doc, "model.hidden_dim.x", json!(1)).is_err());
        assert!(set_path(&mut doc, "model..x", json!(1)).is_err());
    }

    #[test]
    fn assignment_values() {
        assert_eq!(parse_assignment("a.b=3").unwrap(), ("a.b".into(), json!(3)));
        assert_eq!(parse_assignment("x=[\"Primary\"]").unwrap().1, json!(["Primary"]));
        assert_eq!(parse_assignment("d=runs/x").unwrap().1, json!("runs/x"));
        assert!(parse_assignment("novalue").is_err());
    }
}
