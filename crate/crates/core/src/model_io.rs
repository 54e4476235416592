//! On-disk model format shared by the embedding and forward models.
//!
//! JSON with a flat named-parameter map:
//! `{format_version, kind, veg_type, arch: [layer specs], params: {name: {shape, data}}}`
//! plus `stop_embedding` and `stop_threshold` for forward models.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::LayerSpec;
use crate::nn::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: String,
    pub veg_type: String,
    pub arch: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_threshold: Option<f64>,
}

pub fn save_model_file(path: &Path, model: &ModelFile) -> Result<()> {
    let json = serde_json::to_string(model).map_err(|e| Error::io(path.display().to_string(), e))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model_file(path: &Path, expected_kind: &str) -> Result<ModelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let model: ModelFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if model.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported model format_version {}",
            model.format_version
        )));
    }
    if model.kind != expected_kind {
        return Err(Error::Config(format!(
            "expected a '{expected_kind}' model, found '{}'",
            model.kind
        )));
    }
    for t in model.params.values() {
        t.ensure_finite("model parameter")?;
    }
    Ok(model)
}

/// Append a prefix to every parameter name.
pub fn prefixed(prefix: &str, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    params.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect()
}

/// Extract the sub-map under `prefix.`, stripping the prefix.
pub fn strip_prefix(prefix: &str, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let full = format!("{prefix}.");
    params
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&full).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}
