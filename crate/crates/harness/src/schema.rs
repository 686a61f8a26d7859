//! JSON schemas shipped in the repository's `schemas/` directory.

use serde_json::Value;

use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest";
pub const INPUT_STUDY: &str = "input_study";
pub const CALCULUS_REPORT: &str = "calculus_report";
pub const CONFIG: &str = "config";

fn source(name: &str) -> Option<&'static str> {
    match name {
        MANIFEST => Some(include_str!("../../../schemas/manifest.schema.json")),
        INPUT_STUDY => Some(include_str!("../../../schemas/input_study.schema.json")),
        CALCULUS_REPORT => Some(include_str!("../../../schemas/calculus_report.schema.json")),
        CONFIG => Some(include_str!("../../../schemas/config.schema.json")),
        _ => None,
    }
}

pub fn schema(name: &str) -> Result<Value> {
    let text = source(name).ok_or_else(|| HarnessError::Config(format!("no schema named `{name}`")))?;
    Ok(serde_json::from_str(text)?)
}

/// Validates `doc` against the named schema, reporting every violation.
pub fn validate(name: &str, doc: &Value) -> Result<()> {
    let schema = schema(name)?;
    let validator = jsonschema::validator_for(&schema)
        .map_err(|e| HarnessError::Schema { schema: name.into(), reason: format!("schema itself is invalid: {e}") })?;
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at `{}`", e, e.instance_path)).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Schema { schema: name.into(), reason: errors.join("; ") })
    }
}
