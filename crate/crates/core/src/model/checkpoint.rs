//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.json    model configuration plus free-form metadata
//! <dir>/weights.json   [{"name", "shape", "offset"}] in parameter order
//! <dir>/weights.bin    little-endian f32 values, concatenated
//! ```
//!
//! A checkpoint is written into a sibling temporary directory and renamed
//! into place.

use std::fs;
use std::path::{Path, PathBuf};

use octsurf_autograd::{Float, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{OctError, Result};
use crate::io::{encode_f32_le, read_f32_le, read_json, write_bytes_atomic, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save<T: Float>(model: &Model<T>, dir: &Path, meta: serde_json::Value) -> Result<()> {
    let tmp = sibling(dir, ".tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| OctError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| OctError::io(&tmp, e))?;
    let mut index = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for p in model.params().iter() {
        index.push(WeightEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        offset += p.value.len();
    }
    let bytes = encode_f32_le(model.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.as_f64() as f32)));
    write_bytes_atomic(&tmp.join("weights.bin"), &bytes)?;
    write_json(&tmp.join("weights.json"), &index)?;
    write_json(&tmp.join("config.json"), &CheckpointConfig { model: model.config().clone(), meta })?;
    let old = sibling(dir, ".old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| OctError::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| OctError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| OctError::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| OctError::io(&old, e))?;
    }
    Ok(())
}

pub fn read_config(dir: &Path) -> Result<CheckpointConfig> {
    read_json(&dir.join("config.json"))
}

/// Loads a checkpoint; with `expected`, a differing model configuration is
/// rejected.
pub fn load<T: Float>(dir: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let cfg = read_config(dir)?;
    if let Some(exp) = expected {
        if exp != &cfg.model {
            return Err(OctError::Config(format!(
                "checkpoint {} was trained with model config {:?}, expected {:?}",
                dir.display(),
                cfg.model,
                exp
            )));
        }
    }
    let index_path = dir.join("weights.json");
    let index: Vec<WeightEntry> = read_json(&index_path)?;
    let total: usize = index.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let values = read_f32_le(&dir.join("weights.bin"), total)?;
    let mut store = ParamStore::new();
    for e in &index {
        let n: usize = e.shape.iter().product();
        if e.offset + n > values.len() {
            return Err(OctError::format(&index_path, format!("entry {} overruns the payload", e.name)));
        }
        let data = values[e.offset..e.offset + n].iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        store.push(e.name.clone(), Tensor::from_vec(&e.shape, data).unwrap());
    }
    Model::from_parts(cfg.model, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AlignSource, ModelMode};
    use crate::types::OctVolume;

    fn cfg() -> ModelConfig {
        ModelConfig { levels: 2, base_channels: 2, k: 2, mode: ModelMode::Hybrid2d3d, decoder_3d_min_level: 0, align_head_level: 0, seed: 3 }
    }

    #[test]
    fn roundtrip_gives_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let m = Model::<f32>::new(cfg()).unwrap();
        save(&m, &path, serde_json::json!({"epoch": 1})).unwrap();
        // overwrite in place works too
        save(&m, &path, serde_json::json!({"epoch": 2})).unwrap();
        let back: Model<f32> = load(&path, Some(&cfg())).unwrap();
        let v = OctVolume::from_fn("x", 8, 3, 8, Default::default(), |a, b, r| (a * 3 + b * 5 + r) as f32 / 40.0).unwrap();
        let a = m.predict(&v, &AlignSource::Learned).unwrap();
        let b = back.predict(&v, &AlignSource::Learned).unwrap();
        assert_eq!(a.surface_logits, b.surface_logits);
        assert_eq!(a.semantic_logits, b.semantic_logits);
        assert_eq!(read_config(&path).unwrap().meta["epoch"], 2);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&Model::<f32>::new(cfg()).unwrap(), &path, serde_json::Value::Null).unwrap();
        let other = ModelConfig { base_channels: 4, ..cfg() };
        let err = load::<f32>(&path, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }
}
