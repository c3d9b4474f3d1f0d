//! Layered configuration: built-in defaults, then a JSON document, then
//! `key=value` overrides addressed by dotted paths.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Recursively merges `patch` into `base`. Objects merge key by key; any other
/// value replaces its target.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(target), Value::Object(patch)) => {
            for (key, value) in patch {
                match target.get_mut(&key) {
                    Some(slot) => merge_json(slot, value),
                    None => {
                        target.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Applies one `dotted.key=value` assignment. Every path segment must already
/// exist, so misspelled keys are rejected by name. The value is parsed as JSON
/// and falls back to a plain string (`train.inner_optimizer=plain_sgd`).
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "override `{assignment}` has an empty key"
        )));
    }
    let mut slot = doc;
    for segment in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(segment),
            Value::Array(items) => segment.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::InvalidConfig(format!("unknown key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Resolves `defaults < file < overrides` into a typed configuration.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<Value>,
    overrides: &[String],
) -> Result<T> {
    let mut doc = serde_json::to_value(defaults)?;
    if let Some(file) = file {
        if !file.is_object() {
            return Err(Error::InvalidConfig(
                "configuration file must hold a JSON object".into(),
            ));
        }
        merge_json(&mut doc, file);
    }
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(e.to_string()))
}
