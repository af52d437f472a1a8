//! Versioned JSON model files. Floats are written with shortest round-trip
//! precision, so a reloaded model decides bit-for-bit like the original.

use std::fs;
use std::path::Path;

use super::HarnessError;
use crate::runtime::{PolicyModel, FORMAT_VERSION};

pub fn to_string(model: &PolicyModel) -> Result<String, HarnessError> {
    serde_json::to_string_pretty(model).map_err(|e| HarnessError::ModelFormat(e.to_string()))
}

pub fn from_str(text: &str) -> Result<PolicyModel, HarnessError> {
    let tree: serde_json::Value =
        serde_json::from_str(text).map_err(|e| HarnessError::ModelFormat(e.to_string()))?;
    let version = tree
        .get("format_version")
        .ok_or_else(|| HarnessError::ModelFormat("missing format_version".into()))?;
    if version.as_u64() != Some(u64::from(FORMAT_VERSION)) {
        return Err(HarnessError::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION,
        });
    }
    let mut model: PolicyModel =
        serde_json::from_value(tree).map_err(|e| HarnessError::ModelFormat(e.to_string()))?;
    model.structure.graph.rebuild_index();
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &PolicyModel, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let text = to_string(model)?;
    fs::write(path.as_ref(), text).map_err(|e| HarnessError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PolicyModel, HarnessError> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| HarnessError::io(path, e))?;
    from_str(&text)
}
