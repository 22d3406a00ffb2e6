//! Checkpoints: a JSON manifest naming each array with its shape and byte
//! offset, next to one little-endian blob in the model's precision.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::{ModelConfig, Params, Vit};

pub const FORMAT: &str = "cbvit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub config: ModelConfig,
    pub arrays: Vec<ArrayEntry>,
}

/// Blob path belonging to a manifest path (`x.json` → `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode<T: Scalar>(vit: &Vit<T>, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut arrays = Vec::new();
    for (name, t) in vit.params().iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            trainable: t.requires_grad(),
        });
        for &v in t.data() {
            match T::NAME {
                "f32" => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::NAME.into(),
        blob: blob_name.into(),
        config: vit.config().clone(),
        arrays,
    };
    (manifest, blob)
}

pub fn decode<T: Scalar>(manifest: &Manifest, blob: &[u8]) -> Result<Params<T>> {
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        _ => 0,
    };
    if manifest.format != FORMAT || manifest.version != VERSION || width == 0 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    let mut params = Params::new();
    for a in &manifest.arrays {
        let numel: usize = a.shape.iter().product();
        let end = a.offset + width * numel;
        let bytes = blob.get(a.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!("{}: bytes {}..{end} beyond blob of {}", a.name, a.offset, blob.len()))
        })?;
        let data = bytes
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        let t = Tensor::new(a.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", a.name)))?
            .with_requires_grad(a.trainable);
        params.insert(a.name.clone(), t);
    }
    Ok(params)
}

/// Writes `path` (manifest) and its sibling `.bin` blob.
pub fn save<T: Scalar>(vit: &Vit<T>, path: &Path) -> Result<()> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let (manifest, blob) = encode(vit, &blob_name);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    fs::write(&blob_file, blob).map_err(|e| Error::io(&blob_file, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads a model using the configuration stored in the manifest.
pub fn load<T: Scalar>(path: &Path) -> Result<Vit<T>> {
    let manifest = read_manifest(path)?;
    let config = manifest.config.clone();
    load_parts(path, &manifest, config)
}

/// Loads the arrays of a checkpoint into an explicitly given configuration;
/// any array that does not fit is reported.
pub fn load_with_config<T: Scalar>(path: &Path, config: ModelConfig) -> Result<Vit<T>> {
    let manifest = read_manifest(path)?;
    load_parts(path, &manifest, config)
}

fn load_parts<T: Scalar>(path: &Path, manifest: &Manifest, config: ModelConfig) -> Result<Vit<T>> {
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    Vit::from_params(config, decode(manifest, &blob)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_bit_exact() {
        let vit = Vit::<f32>::new(ModelConfig::tiny(), 11).unwrap();
        let (m, blob) = encode(&vit, "x.bin");
        let params = decode::<f32>(&m, &blob).unwrap();
        let back = Vit::from_params(m.config.clone(), params).unwrap();
        for ((_, a), (_, b)) in vit.params().iter().zip(back.params().iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
            assert_eq!(a.requires_grad(), b.requires_grad());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let vit = Vit::<f32>::new(ModelConfig::tiny(), 1).unwrap();
        let (m, blob) = encode(&vit, "x.bin");
        assert!(matches!(decode::<f32>(&m, &blob[..blob.len() - 4]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_mismatch_lists_arrays() {
        let vit = Vit::<f32>::new(ModelConfig::tiny(), 1).unwrap();
        let (m, blob) = encode(&vit, "x.bin");
        let params = decode::<f32>(&m, &blob).unwrap();
        let wider = ModelConfig { dim: 12, ..ModelConfig::tiny() };
        let err = Vit::from_params(wider, params).unwrap_err().to_string();
        assert!(err.contains("patch_embed.weight"), "{err}");
        assert!(err.contains("head.weight"), "{err}");
    }
}
