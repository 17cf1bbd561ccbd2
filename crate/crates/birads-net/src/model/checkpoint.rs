//! Checkpoint persistence and pretrained-weight archives.
//!
//! A checkpoint is a directory holding:
//!
//! - `config.json` — the architecture spec, seed, canonical task order, and
//!   the preprocessing configuration used at training time;
//! - `weights.index.json` — tensor name, logical shape, byte offset, and
//!   element count for every parameter tensor, in registry order;
//! - `weights.bin` — the concatenated little-endian 32-bit float payload.
//!
//! A pretrained backbone archive is the same flat tensor container (index +
//! payload, no config) restricted to `encoder.*` tensors.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::TASK_ORDER;
use crate::model::{BiradsNet, ModelSpec, TensorRef};
use crate::preprocess::PreprocessConfig;

const FORMAT_VERSION: u32 = 1;
const LEXICON_VERSION: &str = "bus-descriptors-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    format_version: u32,
    model: ModelSpec,
    task_order: Vec<String>,
    lexicon_version: String,
    preprocess: PreprocessConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightIndex {
    dtype: String,
    byte_order: String,
    tensors: Vec<TensorIndexEntry>,
}

fn tensor_values(model: &BiradsNet<f32>, reference: TensorRef) -> &[f32] {
    match reference {
        TensorRef::Mat(i) => model.params().mats[i].as_slice().unwrap(),
        TensorRef::Vec(i) => model.params().vecs[i].as_slice().unwrap(),
    }
}

fn write_archive<F>(model: &BiradsNet<f32>, dir: &Path, mut keep: F) -> Result<()>
where
    F: FnMut(&str) -> bool,
{
    fs::create_dir_all(dir)?;
    let mut index = WeightIndex {
        dtype: "f32".into(),
        byte_order: "little".into(),
        tensors: Vec::new(),
    };
    let mut payload = BufWriter::new(fs::File::create(dir.join("weights.bin"))?);
    let mut offset = 0u64;
    for entry in model.registry() {
        if !keep(&entry.name) {
            continue;
        }
        let values = tensor_values(model, entry.reference);
        for v in values {
            payload.write_all(&v.to_le_bytes())?;
        }
        index.tensors.push(TensorIndexEntry {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            offset,
            len: values.len(),
        });
        offset += (values.len() * 4) as u64;
    }
    payload.flush()?;
    let index_json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize index: {e}")))?;
    fs::write(dir.join("weights.index.json"), index_json + "\n")?;
    Ok(())
}

/// Saves a full checkpoint (config + weights) into `dir`.
pub fn save_checkpoint(
    model: &BiradsNet<f32>,
    preprocess: &PreprocessConfig,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    write_archive(model, dir, |_| true)?;
    let config = CheckpointConfig {
        format_version: FORMAT_VERSION,
        model: model.spec().clone(),
        task_order: TASK_ORDER.iter().map(|s| s.to_string()).collect(),
        lexicon_version: LEXICON_VERSION.into(),
        preprocess: preprocess.clone(),
    };
    let config_json = serde_json::to_string_pretty(&config)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize config: {e}")))?;
    fs::write(dir.join("config.json"), config_json + "\n")?;
    Ok(())
}

/// Saves only the encoder tensors as a pretraining archive.
pub fn save_backbone_archive(model: &BiradsNet<f32>, dir: impl AsRef<Path>) -> Result<()> {
    write_archive(model, dir.as_ref(), |name| name.starts_with("encoder."))
}

fn read_index(dir: &Path) -> Result<WeightIndex> {
    let index_path = dir.join("weights.index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", index_path.display()))
    })?;
    let index: WeightIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed weight index: {e}")))?;
    if index.dtype != "f32" || index.byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported weight encoding {}/{} (expected f32/little)",
            index.dtype, index.byte_order
        )));
    }
    Ok(index)
}

fn read_payload(dir: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(dir.join("weights.bin"))
        .map_err(|e| Error::Checkpoint(format!("cannot open weights.bin: {e}")))?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn fill_tensor(
    model: &mut BiradsNet<f32>,
    reference: TensorRef,
    entry: &TensorIndexEntry,
    payload: &[u8],
) -> Result<()> {
    let start = entry.offset as usize;
    let end = start + entry.len * 4;
    if end > payload.len() {
        return Err(Error::Checkpoint(format!(
            "tensor `{}`: payload range {start}..{end} exceeds weights.bin ({} bytes)",
            entry.name,
            payload.len()
        )));
    }
    let values: Vec<f32> = payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let target: &mut [f32] = match reference {
        TensorRef::Mat(i) => model.params_mut().mats[i].as_slice_mut().unwrap(),
        TensorRef::Vec(i) => model.params_mut().vecs[i].as_slice_mut().unwrap(),
    };
    if target.len() != values.len() {
        return Err(Error::Checkpoint(format!(
            "tensor `{}`: archive has {} elements, model expects {}",
            entry.name,
            values.len(),
            target.len()
        )));
    }
    target.copy_from_slice(&values);
    Ok(())
}

/// Loads a checkpoint directory back into a model plus the preprocessing
/// configuration it was trained with.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(BiradsNet<f32>, PreprocessConfig)> {
    let dir = dir.as_ref();
    let config_text = fs::read_to_string(dir.join("config.json")).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", dir.join("config.json").display()))
    })?;
    let config: CheckpointConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::Checkpoint(format!("malformed config.json: {e}")))?;
    if config.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}, expected {FORMAT_VERSION}",
            config.format_version
        )));
    }
    let expected: Vec<String> = TASK_ORDER.iter().map(|s| s.to_string()).collect();
    if config.task_order != expected {
        return Err(Error::Checkpoint(format!(
            "task order mismatch: checkpoint has {:?}",
            config.task_order
        )));
    }

    let mut model = BiradsNet::<f32>::from_spec(config.model)?;
    let index = read_index(dir)?;
    let payload = read_payload(dir)?;

    if index.tensors.len() != model.registry().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            index.tensors.len(),
            model.registry().len()
        )));
    }
    for (pos, archived) in index.tensors.iter().enumerate() {
        let expected = &model.registry()[pos];
        if archived.name != expected.name {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` out of order (expected `{}`)",
                archived.name, expected.name
            )));
        }
        if archived.shape != expected.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: archive shape {:?}, model expects {:?}",
                archived.name, archived.shape, expected.shape
            )));
        }
        let reference = expected.reference;
        fill_tensor(&mut model, reference, archived, &payload)?;
    }
    Ok((model, config.preprocess))
}

/// Populates the encoder tensors of `model` from a pretraining archive,
/// leaving all head parameters at their fresh initialization. Fails on the
/// first tensor whose name or shape does not validate.
pub fn load_backbone_weights(model: &mut BiradsNet<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let payload = read_payload(dir)?;

    let backbone: Vec<(String, Vec<usize>, TensorRef)> = model
        .registry()
        .iter()
        .filter(|e| e.name.starts_with("encoder."))
        .map(|e| (e.name.clone(), e.shape.clone(), e.reference))
        .collect();

    for (name, shape, reference) in backbone {
        let archived = index
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| {
                Error::Checkpoint(format!("pretrained archive is missing tensor `{name}`"))
            })?;
        if archived.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: archive shape {:?}, model expects {:?}",
                archived.shape, shape
            )));
        }
        fill_tensor(model, reference, archived, &payload)?;
    }
    Ok(())
}
