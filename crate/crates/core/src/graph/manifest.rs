//! JSON manifest plus `params/<name>.qt` blob directory.
//!
//! ```json
//! {
//!   "name": "ToyResNet",
//!   "input_shape": [3, 8, 8],
//!   "nodes": [{"id": "stem.conv", "kind": "Conv2D", "attrs": {...},
//!              "params": ["stem.conv.weight"], "inputs": ["input"]}, ...],
//!   "param_files": {"stem.conv.weight": "params/stem.conv.weight.qt", ...},
//!   "quant_sites": [...],
//!   "quantization": {...}
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerNode, ModelGraph, QuantSiteAnnotation};
use crate::error::{Error, Result};
use crate::tensor::{load_blob, save_blob};

pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub nodes: Vec<LayerNode>,
    pub param_files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quant_sites: Vec<QuantSiteAnnotation>,
    /// Present on quantized models; owned by the `quantize` module.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<serde_json::Value>,
}

fn check_param_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::validation(format!("parameter name `{name}` is not file-safe")));
    }
    Ok(())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn save_model(g: &ModelGraph, dir: impl AsRef<Path>) -> Result<PathBuf> {
    save_model_with_extension(g, dir, None)
}

/// Writes the manifest and parameter blobs; `quantization` is stored verbatim.
pub fn save_model_with_extension(
    g: &ModelGraph,
    dir: impl AsRef<Path>,
    quantization: Option<serde_json::Value>,
) -> Result<PathBuf> {
    g.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut param_files = BTreeMap::new();
    for (name, t) in &g.params {
        check_param_name(name)?;
        let rel = format!("params/{name}.qt");
        save_blob(t, dir.join(&rel))?;
        param_files.insert(name.clone(), rel);
    }
    let manifest = Manifest {
        name: g.name.clone(),
        input_shape: g.input_shape.clone(),
        nodes: g.nodes.clone(),
        param_files,
        quant_sites: g.quant_sites.clone(),
        quantization,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a manifest (file path or model directory) and its blobs.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    load_model_with_extension(path).map(|(g, _)| g)
}

pub fn load_model_with_extension(path: impl AsRef<Path>) -> Result<(ModelGraph, Option<serde_json::Value>)> {
    let path = manifest_path(path.as_ref());
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut g = ModelGraph::new(manifest.name, manifest.input_shape);
    for (name, rel) in &manifest.param_files {
        check_param_name(name)?;
        g.params.insert(name.clone(), load_blob(root.join(rel))?);
    }
    g.nodes = manifest.nodes;
    g.quant_sites = manifest.quant_sites;
    g.validate()?;
    Ok((g, manifest.quantization))
}
