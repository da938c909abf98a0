//! Single-file checkpoint container with an embedded plain-text manifest.
//!
//! Layout: 8-byte magic, u32 version, u64 manifest length, manifest TOML,
//! then raw little-endian f32 tensor payloads at the offsets the manifest
//! declares. A checkpoint saved in removed mode contains no feature-encoder
//! tensors and cannot be loaded into an active-mode architecture.

use crate::netblocks::{Model, ModelConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{AdamW, TrainError, TrainState};

const MAGIC: &[u8; 8] = b"RCVRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
    /// Element count.
    len: usize,
    /// "param", "adam_m", or "adam_v".
    kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    global_step: u64,
    stage_index: usize,
    seed: u64,
    optimizer_t: u64,
    config: ModelConfig,
    #[serde(rename = "tensor", default)]
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let store = state.model.store();
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor<f32>> = Vec::new();
    let mut offset = 0u64;
    for (id, name, t) in store.iter_live() {
        let slots = [
            ("param", Some(t)),
            ("adam_m", state.optimizer.moment_m(id)),
            ("adam_v", state.optimizer.moment_v(id)),
        ];
        for (kind, tensor) in slots {
            let Some(tensor) = tensor else { continue };
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                offset,
                len: tensor.len(),
                kind: kind.into(),
            });
            payload.push(tensor);
            offset += (tensor.len() * 4) as u64;
        }
    }

    let manifest = Manifest {
        global_step: state.global_step,
        stage_index: state.stage_index,
        seed: state.seed,
        optimizer_t: state.optimizer.t,
        config: state.model.config().clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| TrainError::Checkpoint(e.to_string()))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    for t in payload {
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_manifest(r: &mut BufReader<File>) -> Result<(Manifest, u64), TrainError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::Checkpoint("bad magic bytes".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let mlen = u64::from_le_bytes(buf8);
    let mut text = vec![0u8; mlen as usize];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("manifest: {e}")))?;
    Ok((manifest, 20 + mlen))
}

fn read_tensor(
    r: &mut BufReader<File>,
    payload_start: u64,
    e: &TensorEntry,
) -> Result<Tensor<f32>, TrainError> {
    r.seek(SeekFrom::Start(payload_start + e.offset))?;
    let mut bytes = vec![0u8; e.len * 4];
    r.read_exact(&mut bytes).map_err(|_| {
        TrainError::Checkpoint(format!("truncated payload for tensor {}", e.name))
    })?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(e.shape.clone(), data))
}

/// Load a full training state (model, optimizer moments, counters).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let (manifest, payload_start) = read_manifest(&mut r)?;
    let model = load_model_from(&mut r, &manifest, payload_start, None)?;
    let mut optimizer = AdamW::new(model.store().slots());
    optimizer.t = manifest.optimizer_t;
    // Moments are matched to store slots by name.
    for (id, name, t) in model.store().iter_live() {
        let m = manifest.tensors.iter().find(|e| e.kind == "adam_m" && e.name == name);
        let v = manifest.tensors.iter().find(|e| e.kind == "adam_v" && e.name == name);
        if let (Some(me), Some(ve)) = (m, v) {
            if me.shape != t.shape() || ve.shape != t.shape() {
                return Err(TrainError::Checkpoint(format!("moment shape mismatch for {name}")));
            }
            let mt = read_tensor(&mut r, payload_start, me)?;
            let vt = read_tensor(&mut r, payload_start, ve)?;
            optimizer.set_moments(id, mt, vt);
        }
    }
    Ok(TrainState {
        model,
        optimizer,
        global_step: manifest.global_step,
        stage_index: manifest.stage_index,
        seed: manifest.seed,
    })
}

/// Load only the model, optionally insisting on an expected configuration.
/// A mode/architecture mismatch is a compatibility error.
pub fn load_model(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<Model<f32>, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let (manifest, payload_start) = read_manifest(&mut r)?;
    load_model_from(&mut r, &manifest, payload_start, expected)
}

fn load_model_from(
    r: &mut BufReader<File>,
    manifest: &Manifest,
    payload_start: u64,
    expected: Option<&ModelConfig>,
) -> Result<Model<f32>, TrainError> {
    let cfg = match expected {
        None => manifest.config.clone(),
        Some(want) => {
            let saved = &manifest.config;
            let structural_match = want.backbone == saved.backbone
                && want.feature_dim == saved.feature_dim
                && want.context_dim == saved.context_dim
                && want.hidden_dim == saved.hidden_dim
                && want.levels == saved.levels
                && want.radius == saved.radius;
            if !structural_match {
                return Err(TrainError::Compatibility(format!(
                    "checkpoint architecture {saved:?} does not match requested {want:?}"
                )));
            }
            if saved.mode.is_removed() && !want.mode.is_removed() {
                return Err(TrainError::Compatibility(
                    "checkpoint was saved in removed mode; it cannot serve an active-mode config"
                        .into(),
                ));
            }
            want.clone()
        }
    };

    let mut model =
        Model::new(cfg, manifest.seed).map_err(|e| TrainError::Compatibility(e.to_string()))?;
    // Every live parameter must be present with the exact shape.
    let entries: Vec<(usize, String, Vec<usize>)> = model
        .store()
        .iter_live()
        .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    for (id, name, shape) in entries {
        let e = manifest
            .tensors
            .iter()
            .find(|e| e.kind == "param" && e.name == name)
            .ok_or_else(|| {
                TrainError::Compatibility(format!("checkpoint is missing parameter {name}"))
            })?;
        if e.shape != shape {
            return Err(TrainError::Compatibility(format!(
                "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                e.shape, shape
            )));
        }
        *model.store_mut().get_mut(id) = read_tensor(r, payload_start, e)?;
    }
    Ok(model)
}
