//! Named-tensor checkpoints: `model.safetensors` (float32, keyed `component/path`)
//! plus a `manifest.json` describing the class space and configuration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, UiFormer};
use crate::error::{Error, Result};

pub const TENSOR_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Stage that produced the checkpoint (`init`, `base_pretrain`, ...).
    pub stage: String,
    pub model: ModelConfig,
    pub num_classes: usize,
    pub num_base: usize,
    pub unknown_class: Option<usize>,
    pub config_hash: String,
    pub seed: u64,
}

/// A checkpoint held in memory: manifest plus float32 parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Capture `model` (parameters are rounded to float32, as on disk).
    pub fn from_model(model: &UiFormer, manifest: Manifest) -> Result<Self> {
        let tensors = model
            .snapshot()?
            .into_iter()
            .map(|(k, t)| Ok((k, t.to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Checkpoint {
            manifest: read_manifest(dir)?,
            tensors: read_tensors(dir)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_parts(&self.tensors, &self.manifest, dir)
    }

    /// Build a model holding these parameters.
    pub fn instantiate(&self, dtype: DType) -> Result<UiFormer> {
        let m = &self.manifest;
        let mut model = UiFormer::new(&m.model, m.num_base, m.seed, dtype)?;
        model.set_class_layout(m.num_classes, m.unknown_class)?;
        model.params_mut().load(&self.tensors)?;
        Ok(model)
    }

    pub fn hash(&self) -> Result<String> {
        hash_tensors(&self.tensors)
    }
}

/// Save the model's parameters and manifest into `dir`, replacing any previous checkpoint.
pub fn save(model: &UiFormer, manifest: &Manifest, dir: &Path) -> Result<()> {
    write_parts(&model.snapshot()?, manifest, dir)
}

fn write_parts(tensors: &BTreeMap<String, Tensor>, manifest: &Manifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: HashMap<String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let tmp = dir.join(format!("{TENSOR_FILE}.tmp"));
    candle_core::safetensors::save(&tensors, &tmp)?;
    rename(&tmp, &dir.join(TENSOR_FILE))?;
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&tmp, e))?;
    rename(&tmp, &dir.join(MANIFEST_FILE))
}

fn rename(from: &PathBuf, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(|e| Error::io(to, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(TENSOR_FILE);
    if !path.exists() {
        return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(candle_core::safetensors::load(&path, &Device::Cpu)?.into_iter().collect())
}

/// Rebuild a model from a checkpoint directory.
pub fn load(dir: &Path, dtype: DType) -> Result<(UiFormer, Manifest)> {
    let ckpt = Checkpoint::read(dir)?;
    Ok((ckpt.instantiate(dtype)?, ckpt.manifest))
}

/// SHA-256 over the raw little-endian float32 bytes of the given parameters.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (k, t) in tensors {
        h.update(k.as_bytes());
        h.update([0u8]);
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Raw float32 bit patterns of every tensor, for exact comparisons.
pub fn tensor_bits(tensors: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Vec<u32>>> {
    tensors
        .iter()
        .map(|(k, t)| {
            let bits = t
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?
                .into_iter()
                .map(f32::to_bits)
                .collect();
            Ok((k.clone(), bits))
        })
        .collect()
}
