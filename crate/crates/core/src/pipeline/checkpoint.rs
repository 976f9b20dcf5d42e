//! Single-file checkpoints: a little-endian `u64` manifest length, the JSON
//! manifest, then every parameter as little-endian `f32` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::model::PrismModel;
use crate::pipeline::config::RunConfig;

pub const FORMAT: &str = "prism-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub config: RunConfig,
    pub arrays: Vec<ArrayEntry>,
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: BTreeMap<String, Vec<f32>>,
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, model: &PrismModel, config: &RunConfig, step: u64) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, var) in model.store().iter() {
        let t: &Tensor = var.as_tensor();
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
        });
        let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        step,
        config: config.clone(),
        arrays,
    };
    let header = serde_json::to_vec(&manifest)?;

    let file_name = path
        .file_name()
        .ok_or_else(|| PrismError::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let integrity = |msg: String| PrismError::Integrity(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(integrity("file shorter than its length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| integrity(format!("manifest length {header_len} exceeds file size")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| integrity(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(integrity(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(PrismError::VersionMismatch {
            found: manifest.version,
            expected: VERSION,
        });
    }
    let expected: usize = manifest
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>() * 4)
        .sum();
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(integrity(format!(
            "payload has {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }
    let mut arrays = BTreeMap::new();
    let mut offset = 0;
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let values = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        arrays.insert(entry.name.clone(), values);
    }
    Ok(Checkpoint { manifest, arrays })
}

/// Copies checkpoint arrays into `model`. Every array is checked before any
/// parameter is touched.
pub fn load_into(model: &PrismModel, ckpt: &Checkpoint) -> Result<()> {
    let shapes: BTreeMap<&str, &[usize]> = ckpt
        .manifest
        .arrays
        .iter()
        .map(|a| (a.name.as_str(), a.shape.as_slice()))
        .collect();
    for (name, var) in model.store().iter() {
        let expected = var.as_tensor().dims();
        match shapes.get(name.as_str()) {
            Some(found) if *found == expected => {}
            found => {
                return Err(PrismError::ShapeMismatch {
                    name: name.clone(),
                    found: found.map_or_else(|| "missing".to_string(), |s| format!("{s:?}")),
                    expected: format!("{expected:?}"),
                })
            }
        }
    }
    if let Some(extra) = shapes.keys().find(|k| model.store().get(k).is_none()) {
        return Err(PrismError::ShapeMismatch {
            name: extra.to_string(),
            found: format!("{:?}", shapes[extra]),
            expected: "absent".into(),
        });
    }
    for (name, var) in model.store().iter() {
        let t = var.as_tensor();
        let values = Tensor::from_slice(&ckpt.arrays[name], t.dims(), t.device())?.to_dtype(t.dtype())?;
        var.set(&values)?;
    }
    Ok(())
}

/// Builds a model from the stored configuration and loads its parameters.
pub fn load_model(path: &Path) -> Result<(PrismModel, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    let model = PrismModel::new(
        ckpt.manifest.config.model_config()?,
        ckpt.manifest.config.seed,
        DType::F32,
    )?;
    load_into(&model, &ckpt)?;
    Ok((model, ckpt))
}
