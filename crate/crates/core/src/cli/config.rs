//! Layered configuration: defaults, then a JSON file, then `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::CliError;

/// Sets `path` (dot separated) in `root` to `value`. Every segment must
/// already exist, so misspelled keys are rejected rather than ignored.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let here = segments[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*seg).ok_or_else(|| CliError::usage(format!("unknown config key {here:?}")))?,
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| CliError::usage(format!("{here:?}: expected an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::usage(format!("{here:?}: index out of range 0..{len}")))?
            }
            _ => return Err(CliError::usage(format!("unknown config key {here:?}"))),
        };
    }
    *node = value;
    Ok(())
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(spec: &str) -> Result<(String, Value), CliError> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {spec:?} is not key=value")))?;
    if k.is_empty() {
        return Err(CliError::usage(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Loads `T` from its defaults, an optional JSON file and overrides.
pub fn load<T>(file: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let base: T = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => T::default(),
    };
    apply(base, overrides)
}

pub fn apply<T: Serialize + DeserializeOwned>(base: T, overrides: &[String]) -> Result<T, CliError> {
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut v = serde_json::to_value(base).map_err(|e| CliError::usage(e.to_string()))?;
    for spec in overrides {
        let (k, val) = parse_override(spec)?;
        set_path(&mut v, &k, val)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid override: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::TrainConfig;

    #[test]
    fn overrides_reach_nested_keys() {
        let c: TrainConfig = apply(
            TrainConfig::default(),
            &["lr=0.01".into(), "suite.world.frames=7".into(), "ablations.limited_gnn=true".into(), "T=5".into()],
        )
        .unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.suite.world.frames, 7);
        assert!(c.ablations.limited_gnn);
        assert_eq!(c.frames, 5);
        let c: TrainConfig = apply(TrainConfig::default(), &["lambdas.2=3".into(), "grad_clip=5".into()]).unwrap();
        assert_eq!(c.lambdas, [1.0, 1.0, 3.0, 1.0]);
        assert_eq!(c.grad_clip, Some(5.0));
    }

    #[test]
    fn unknown_or_malformed_overrides_are_rejected() {
        for bad in ["nope=1", "suite.world.nope=1", "lr", "=3", "lr=fast", "lambdas.9=1"] {
            let e = apply(TrainConfig::default(), &[bad.to_string()]).unwrap_err();
            assert_eq!(e.code, 1, "{bad}");
        }
    }
}
