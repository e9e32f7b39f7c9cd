use floorgen::pipeline::RunConfig;
use serde_json::Value;

use crate::commands::CliError;

/// Applies `a.b.c=VALUE` assignments to the JSON form of `cfg`. VALUE is
/// parsed as JSON and taken as a plain string when that fails.
pub fn apply(cfg: &RunConfig, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {s:?}: expected PATH=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| CliError::Config(format!("--set: no config field {path:?}")))?;
        }
        *node = value;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Config(format!("--set: {e}")))
}
