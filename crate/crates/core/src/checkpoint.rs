//! Versioned on-disk model snapshots.
//!
//! A checkpoint is a directory holding `manifest.json` (format version,
//! model config, step counter, per-tensor SHA-256 digests) and
//! `params.safetensors` with every named parameter tensor as little-endian
//! f32.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Critic, Generator, ModelConfig, WgainModel};
use crate::nn::{Param, ParamKind, ParamSet};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Digest over all tensor digests in order; identifies the weights.
    pub content_hash: String,
}

fn tensor_bytes(p: &Param<f32>) -> Vec<u8> {
    p.value.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn entries(params: &[&ParamSet<f32>]) -> Vec<(TensorEntry, Vec<u8>)> {
    params
        .iter()
        .flat_map(|set| set.iter())
        .map(|p| {
            let bytes = tensor_bytes(p);
            let entry = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                kind: p.kind,
                sha256: hex(&Sha256::digest(&bytes)),
            };
            (entry, bytes)
        })
        .collect()
}

fn content_hash(tensors: &[TensorEntry]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0]);
        h.update(t.sha256.as_bytes());
    }
    hex(&h.finalize())
}

/// Digest identifying the weights of a model, equal to the `content_hash`
/// its checkpoint would carry.
pub fn model_hash(model: &WgainModel<f32>) -> String {
    let tensors: Vec<TensorEntry> =
        entries(&[&model.generator.params, &model.critic.params]).into_iter().map(|(e, _)| e).collect();
    content_hash(&tensors)
}

pub fn save(dir: &Path, model: &WgainModel<f32>, step: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let all = entries(&[&model.generator.params, &model.critic.params]);
    let views = all
        .iter()
        .map(|(e, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, e.shape.clone(), bytes)
                .map(|v| (e.name.clone(), v))
                .map_err(|err| Error::Checkpoint(err.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tensors: Vec<TensorEntry> = all.iter().map(|(e, _)| e.clone()).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config(),
        step,
        content_hash: content_hash(&tensors),
        tensors,
    };
    let meta = HashMap::from([("content_hash".to_string(), manifest.content_hash.clone())]);
    // Write to temporaries and rename so readers never see half a snapshot.
    let tmp_tensors = dir.join(format!("{TENSOR_FILE}.tmp"));
    safetensors::serialize_to_file(views, &Some(meta), &tmp_tensors).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp_manifest = dir.join(format!("{MANIFEST_FILE}.tmp"));
    std::fs::write(&tmp_manifest, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(tmp_tensors, dir.join(TENSOR_FILE))?;
    std::fs::rename(tmp_manifest, dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// A loaded snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub model: WgainModel<f32>,
}

/// Loads and verifies a checkpoint. When `expected` is given, the stored
/// config must match it exactly.
pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    if let Some(cfg) = expected {
        if *cfg != manifest.config {
            return Err(Error::Checkpoint("checkpoint was written for a different model config".into()));
        }
    }
    manifest.config.validate()?;
    let bytes = std::fs::read(dir.join(TENSOR_FILE))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut shell = WgainModel::<f32>::new(&manifest.config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let by_name: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let fill = |set: &mut ParamSet<f32>| -> Result<()> {
        for p in set.iter_mut() {
            let entry = by_name.get(p.name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            let view = st.tensor(&p.name).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
            if view.shape() != p.shape.as_slice() || entry.shape != p.shape || view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor {} has an unexpected shape or dtype", p.name)));
            }
            if hex(&Sha256::digest(view.data())) != entry.sha256 {
                return Err(Error::Checkpoint(format!("tensor {} fails its content hash", p.name)));
            }
            p.value = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        }
        Ok(())
    };
    fill(&mut shell.generator.params)?;
    fill(&mut shell.critic.params)?;
    if manifest.tensors.len() != shell.generator.params.len() + shell.critic.params.len() {
        return Err(Error::Checkpoint("checkpoint holds unexpected extra tensors".into()));
    }
    let model = WgainModel {
        generator: Generator::with_params(manifest.config.generator.clone(), shell.generator.params)?,
        critic: Critic::with_params(manifest.config.critic.clone(), shell.critic.params)?,
    };
    if model_hash(&model) != manifest.content_hash {
        return Err(Error::Checkpoint("checkpoint content hash mismatch".into()));
    }
    Ok(Checkpoint { dir: dir.to_path_buf(), manifest, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn model() -> WgainModel<f32> {
        WgainModel::new(&ModelConfig::tiny(), &mut SeedStreams::new(11).stream("init")).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let manifest = save(dir.path(), &m, 42).unwrap();
        assert_eq!(manifest.content_hash, model_hash(&m));
        let ck = load(dir.path(), Some(&ModelConfig::tiny())).unwrap();
        assert_eq!(ck.manifest.step, 42);
        assert_eq!(ck.model.generator.params, m.generator.params);
        assert_eq!(ck.model.critic.params, m.critic.params);
    }

    #[test]
    fn refuses_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), 0).unwrap();
        let err = load(dir.path(), Some(&ModelConfig::desk_scale(32))).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn detects_tampered_tensors() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), 0).unwrap();
        let path = dir.path().join(TENSOR_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x55;
        std::fs::write(&path, bytes).unwrap();
        assert!(load(dir.path(), None).is_err());
    }

    #[test]
    fn refuses_unknown_format_version() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), 0).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(load(dir.path(), None).is_err());
    }
}
