//! Checkpoint directory format: `manifest.json` (tensor index),
//! `weights.bin` (little-endian f32 in manifest order), `config.json`.
//! Weights are stored and trained at f32 precision so that
//! save -> load -> save is byte-identical.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Arr;
use crate::error::{FlexioError, Result};
use crate::model::{FlexioModel, ModelConfig};
use crate::params::ParamSet;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

pub fn save(model: &FlexioModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let mut w = BufWriter::new(fs::File::create(dir.join("weights.bin"))?);
    for (name, tensor) in &model.params.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            byte_offset: offset,
        });
        for &v in tensor.iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        offset += 4 * tensor.len() as u64;
    }
    w.flush()?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&entries)?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&model.config)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<FlexioModel> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(FlexioError::CheckpointError(format!(
            "{}: missing manifest.json",
            dir.display()
        )));
    }
    let entries: Vec<TensorEntry> = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    config.validate()?;
    let mut r = BufReader::new(fs::File::open(dir.join("weights.bin"))?);
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for entry in &entries {
        if entry.dtype != "f32" {
            return Err(FlexioError::CheckpointError(format!(
                "tensor {}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        if entry.byte_offset != expected_offset {
            return Err(FlexioError::CheckpointError(format!(
                "tensor {}: byte offset {} does not match stream position {}",
                entry.name, entry.byte_offset, expected_offset
            )));
        }
        let count: usize = entry.shape.iter().product();
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            vals.push(r.read_f32::<LittleEndian>().map_err(|e| {
                FlexioError::CheckpointError(format!("tensor {}: {e}", entry.name))
            })? as f64);
        }
        expected_offset += 4 * count as u64;
        params.insert(
            entry.name.clone(),
            Arr::from_shape_vec(IxDyn(&entry.shape), vals)
                .map_err(|e| FlexioError::CheckpointError(format!("tensor {}: {e}", entry.name)))?,
        );
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(FlexioError::CheckpointError(format!(
            "weights.bin has {} trailing bytes beyond the manifest",
            trailing.len()
        )));
    }
    let model = FlexioModel { config, params };
    let expected = FlexioModel::init(model.config.clone(), 0)?;
    if expected.params.tensors.len() != model.params.tensors.len()
        || !expected
            .params
            .tensors
            .iter()
            .zip(&model.params.tensors)
            .all(|((en, ev), (ln, lv))| en == ln && ev.shape() == lv.shape())
    {
        return Err(FlexioError::CheckpointError(
            "tensor names/shapes do not match the configured architecture".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::CommMechanism;
    use tempfile::tempdir;

    fn toy() -> FlexioModel {
        FlexioModel::init(ModelConfig::toy(CommMechanism::Tac), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let model = toy();
        save(&model, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.tensors.len(), model.params.tensors.len());
        for ((an, av), (bn, bv)) in model.params.tensors.iter().zip(&loaded.params.tensors) {
            assert_eq!(an, bn);
            assert_eq!(av, bv, "tensor {an} changed across save/load");
        }
    }

    #[test]
    fn resave_is_byte_identical() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let model = toy();
        save(&model, dir_a.path()).unwrap();
        let loaded = load(dir_a.path()).unwrap();
        save(&loaded, dir_b.path()).unwrap();
        for f in ["manifest.json", "weights.bin", "config.json"] {
            let a = fs::read(dir_a.path().join(f)).unwrap();
            let b = fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs after a load/save cycle");
        }
    }

    #[test]
    fn missing_or_corrupt_checkpoints_are_rejected() {
        let dir = tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(FlexioError::CheckpointError(_))));

        let model = toy();
        save(&model, dir.path()).unwrap();

        // Truncated weights.
        let weights = fs::read(dir.path().join("weights.bin")).unwrap();
        fs::write(dir.path().join("weights.bin"), &weights[..weights.len() - 4]).unwrap();
        assert!(matches!(load(dir.path()), Err(FlexioError::CheckpointError(_))));

        // Trailing bytes.
        let mut extended = weights.clone();
        extended.extend_from_slice(&[0u8; 8]);
        fs::write(dir.path().join("weights.bin"), &extended).unwrap();
        assert!(matches!(load(dir.path()), Err(FlexioError::CheckpointError(_))));
        fs::write(dir.path().join("weights.bin"), &weights).unwrap();

        // Unsupported dtype.
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        fs::write(dir.path().join("manifest.json"), manifest.replace("f32", "f16")).unwrap();
        assert!(matches!(load(dir.path()), Err(FlexioError::CheckpointError(_))));
    }
}
