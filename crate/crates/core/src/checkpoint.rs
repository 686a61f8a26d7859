//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries a format version, the checkpoint kind and the config hash.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::VarMap;

use crate::error::{Error, Result};
use crate::nn::sorted_vars;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    /// Serialized config section that produced the weights.
    pub config: String,
}

pub fn save_tensors(path: &Path, meta: &CheckpointMeta, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let mut md = HashMap::new();
    md.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    md.insert("kind".to_string(), meta.kind.clone());
    md.insert("config_hash".to_string(), meta.config_hash.clone());
    md.insert("config".to_string(), meta.config.clone());
    let mut entries: Vec<(&String, &Tensor)> = tensors.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(entries, Some(md), &tmp).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn save_varmap(path: &Path, meta: &CheckpointMeta, varmap: &VarMap) -> Result<()> {
    let tensors = sorted_vars(varmap).into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
    save_tensors(path, meta, &tensors)
}

/// Loads tensors and metadata, rejecting other format versions and kinds.
pub fn load_tensors(path: &Path, expected_kind: &str) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let md = header.metadata().clone().ok_or_else(|| Error::checkpoint(path, "missing metadata header"))?;
    let get =
        |k: &str| md.get(k).cloned().ok_or_else(|| Error::checkpoint(path, format!("missing metadata key `{k}`")));
    let version = get("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let meta = CheckpointMeta { kind: get("kind")?, config_hash: get("config_hash")?, config: get("config")? };
    if meta.kind != expected_kind {
        return Err(Error::checkpoint(path, format!("expected a `{expected_kind}` checkpoint, found `{}`", meta.kind)));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((meta, tensors))
}

/// Copies checkpoint tensors into the matching vars of `varmap`.
///
/// With `prefix`, only vars under that prefix are filled (the rest keep
/// their values), which is how an encoder is lifted out of a full model.
pub fn load_into_varmap(varmap: &VarMap, tensors: &HashMap<String, Tensor>, prefix: Option<&str>) -> Result<usize> {
    let mut loaded = 0;
    for (name, var) in sorted_vars(varmap) {
        if let Some(p) = prefix {
            if !name.starts_with(p) {
                continue;
            }
        }
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::checkpoint("<memory>", format!("checkpoint has no tensor `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::checkpoint(
                "<memory>",
                format!("tensor `{name}` has shape {:?}, model expects {:?}", t.dims(), var.dims()),
            ));
        }
        var.set(t)?;
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(kind: &str) -> CheckpointMeta {
        CheckpointMeta { kind: kind.into(), config_hash: "abc".into(), config: "{}".into() }
    }

    #[test]
    fn roundtrip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        let mut t = HashMap::new();
        t.insert("w".to_string(), Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap());
        save_tensors(&p, &meta("tokenizer"), &t).unwrap();
        let (m, back) = load_tensors(&p, "tokenizer").unwrap();
        assert_eq!(m, meta("tokenizer"));
        assert_eq!(back["w"].to_vec1::<f32>().unwrap(), vec![1., 2., 3.]);
        assert!(load_tensors(&p, "predictor").is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("old.safetensors");
        let t = Tensor::new(&[1f32], &Device::Cpu).unwrap();
        let mut md = HashMap::new();
        md.insert("format_version".to_string(), "0".to_string());
        safetensors::serialize_to_file(vec![("w", &t)], Some(md), &p).unwrap();
        let err = load_tensors(&p, "tokenizer").unwrap_err().to_string();
        assert!(err.contains("format version"), "{err}");
    }
}
