//! Checkpoint format: a `manifest.json` describing config, dtype, and the
//! byte layout of every tensor, plus a `weights.bin` holding raw
//! little-endian values in manifest order. Round-tripping is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: usize,
    /// Byte length in weights.bin.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Write `model` under `dir` as `manifest.json` + `weights.bin`.
pub fn save<E: Scalar>(model: &Model<E>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::with_capacity(model.params.numel() * E::BYTES);
    let mut tensors = Vec::with_capacity(model.params.names.len());
    for (name, tensor) in model.params.names.iter().zip(&model.params.tensors) {
        let offset = blob.len();
        for &v in &tensor.data {
            v.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape.clone(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dtype: E::DTYPE.to_string(),
        config: model.config.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save`] with the same element type.
pub fn load<E: Scalar>(dir: &Path) -> Result<Model<E>> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.dtype != E::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            E::DTYPE
        )));
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    let mut names = Vec::with_capacity(manifest.tensors.len());
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.len != numel * E::BYTES || entry.offset + entry.len > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has inconsistent byte range",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = entry.offset + i * E::BYTES;
            data.push(E::read_le(&blob[at..at + E::BYTES]));
        }
        names.push(entry.name.clone());
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let model = Model {
        config: manifest.config,
        params: ParamStore { names, tensors },
    };
    model.config.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, MaskMode, ModelConfig};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::Tdo,
            mask_mode: MaskMode::Prefix,
            n: 2,
            m: 2,
            d: 16,
            ffn_inner_stage1: 0,
            ffn_inner_stage2: 0,
            heads: 2,
            adaptation: true,
            instrucl_layer: Some(3),
            tag_strategy: 1,
            dropout: 0.0,
            label_smoothing: 0.1,
            vocab_size: 97,
            pre_norm: false,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f32() {
        let model = Model::<f32>::init(toy_config(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let back = load::<f32>(dir.path()).unwrap();
        assert_eq!(model.params.names, back.params.names);
        for (a, b) in model.params.tensors.iter().zip(&back.params.tensors) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f64() {
        let model = Model::<f64>::init(toy_config(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let back = load::<f64>(dir.path()).unwrap();
        for (a, b) in model.params.tensors.iter().zip(&back.params.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let model = Model::<f32>::init(toy_config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        assert!(load::<f64>(dir.path()).is_err());
    }
}
