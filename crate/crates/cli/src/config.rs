//! JSON config files with `CARDIOLOOP_<SCOPE>__<FIELD>[__<FIELD>...]` environment overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "CARDIOLOOP_";

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies every variable under `CARDIOLOOP_<scope>__` to `doc` and returns
/// the dotted paths that were set. Path segments are lowercased.
pub fn apply_overrides<I>(doc: &mut Value, scope: &str, vars: I) -> Result<Vec<String>, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let prefix = format!("{ENV_PREFIX}{}__", scope.to_ascii_uppercase());
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(&prefix)).collect();
    vars.sort();
    let mut applied = Vec::new();
    for (key, raw) in vars {
        let path: Vec<String> = key[prefix.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(CliError::Config(format!("{key}: empty path segment")));
        }
        set_path(doc, &path, parse_value(&raw)).map_err(|m| CliError::Config(format!("{key}: {m}")))?;
        applied.push(path.join("."));
    }
    Ok(applied)
}

fn set_path(doc: &mut Value, path: &[String], v: Value) -> Result<(), String> {
    let mut cur = doc;
    for (i, seg) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.clone(), v);
                    return Ok(());
                }
                map.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| format!("'{seg}' is not an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| format!("index {idx} out of range ({len})"))?;
                if last {
                    *slot = v;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("'{seg}' is below a scalar")),
        };
    }
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Reads `path` (or starts from `T::default()`), applies the scope's overrides
/// from the process environment and deserializes.
pub fn load<T>(path: Option<&Path>, scope: &str) -> Result<T, CliError>
where
    T: DeserializeOwned + Serialize + Default,
{
    let doc = match path {
        Some(p) => parse_doc(p)?,
        None => serde_json::to_value(T::default()).map_err(cardioloop::Error::from)?,
    };
    finish(doc, path, scope)
}

/// Like [`load`] for types without a sensible default.
pub fn load_required<T: DeserializeOwned>(path: &Path, scope: &str) -> Result<T, CliError> {
    let doc = parse_doc(path)?;
    finish(doc, Some(path), scope)
}

fn parse_doc(path: &Path) -> Result<Value, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn finish<T: DeserializeOwned>(mut doc: Value, path: Option<&Path>, scope: &str) -> Result<T, CliError> {
    apply_overrides(&mut doc, scope, std::env::vars())?;
    let name = path.map_or_else(|| format!("default {} config", scope.to_ascii_lowercase()), |p| p.display().to_string());
    serde_json::from_value(doc).map_err(|e| CliError::Config(format!("{name}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn nested_paths_and_types() {
        let mut doc = json!({"seed": 1, "sim": {"fs_ppg": 125.0}, "episodes": [{"hour": 3}]});
        let applied = apply_overrides(
            &mut doc,
            "scenario",
            vars(&[
                ("CARDIOLOOP_SCENARIO__SEED", "42"),
                ("CARDIOLOOP_SCENARIO__SIM__FS_PPG", "100.5"),
                ("CARDIOLOOP_SCENARIO__EPISODES__0__HOUR", "5"),
                ("CARDIOLOOP_SCENARIO__PATIENT__PATIENT_ID", "p-7"),
                ("CARDIOLOOP_SCENARIO__DETECTOR", r#"{"kind":"oracle","confidence":0.9}"#),
            ]),
        )
        .unwrap();
        assert_eq!(applied.len(), 5);
        assert_eq!(doc["seed"], json!(42));
        assert_eq!(doc["sim"]["fs_ppg"], json!(100.5));
        assert_eq!(doc["episodes"][0]["hour"], json!(5));
        assert_eq!(doc["patient"]["patient_id"], json!("p-7"));
        assert_eq!(doc["detector"]["confidence"], json!(0.9));
    }

    #[test]
    fn other_scopes_are_ignored() {
        let mut doc = json!({"dose_ml": 0.5});
        let applied = apply_overrides(
            &mut doc,
            "prescription",
            vars(&[("CARDIOLOOP_SIM__SEED", "3"), ("CARDIOLOOP_PRESCRIPTIONX__DOSE_ML", "1"), ("SEED", "4")]),
        )
        .unwrap();
        assert!(applied.is_empty());
        assert_eq!(doc, json!({"dose_ml": 0.5}));
    }

    #[test]
    fn bad_paths_are_errors() {
        let mut doc = json!({"seed": 1, "list": [1]});
        for key in ["CARDIOLOOP_S__SEED__X", "CARDIOLOOP_S__LIST__9", "CARDIOLOOP_S__LIST__A", "CARDIOLOOP_S____X"] {
            assert!(apply_overrides(&mut doc, "s", vars(&[(key, "1")])).is_err(), "{key}");
        }
    }
}
