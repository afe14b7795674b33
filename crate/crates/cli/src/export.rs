//! Bundles the model artifacts of a finished run into one JSON document.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{Map, Value};

/// Artifact files merged by [`export_model`], keyed by their bundle field.
const PARTS: [(&str, &str, bool); 5] = [
    ("manifest", "manifest.json", true),
    ("eigenvalues", "eigenvalues.json", true),
    ("spectral_model", "spectral_model.json", true),
    ("surrogate", "surrogate.json", false),
    ("controller", "design.json", false),
];

/// Reads the model artifacts in `run_dir` and writes them as one bundle.
/// Returns the names of the parts that were included.
pub fn export_model(run_dir: &Path, dest: &Path) -> Result<Vec<&'static str>> {
    let mut bundle = Map::new();
    let mut included = vec![];
    for (key, file, required) in PARTS {
        let path = run_dir.join(file);
        if !path.exists() {
            anyhow::ensure!(!required, "{} is missing; run at least the optimize stage first", path.display());
            continue;
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        bundle.insert(key.to_string(), value);
        included.push(key);
    }
    koopman_eig::io::write_json(dest, &Value::Object(bundle))?;
    Ok(included)
}
