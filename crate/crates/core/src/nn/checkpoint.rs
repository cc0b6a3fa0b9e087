//! Checkpoint files.
//!
//! A checkpoint is a container (see [`crate::fsio`]) with magic
//! `LSQCKPT\0`. The JSON header records the model configuration, its hash,
//! the epoch, the step size flags and a table of named arrays; the payload
//! holds those arrays as raw little-endian `f64`. Every floating point value
//! lives in the payload so a round trip is bit exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, ModelConfig, QuantizedModel};
use crate::error::{Error, Result};
use crate::fsio;
use crate::quant::GradScale;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First 16 hex digits of the SHA-256 of the configuration's JSON form.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: QuantizedModel,
    pub epoch: usize,
    /// Additional named arrays, e.g. optimizer state.
    pub extra: BTreeMap<String, Vec<f64>>,
    /// Free-form run metadata (data and trainer settings).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    epoch: usize,
    grad_scale: GradScale,
    layers: Vec<LayerFlags>,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFlags {
    weight_step_initialized: bool,
    act_step_initialized: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    /// Offset into the payload, in bytes.
    offset: usize,
    len: usize,
}

impl Checkpoint {
    pub fn new(model: QuantizedModel) -> Self {
        Checkpoint {
            model,
            epoch: 0,
            extra: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    fn arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![("grad_scale_mult".to_string(), vec![self.model.grad_scale_mult])];
        for (i, l) in self.model.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.push((format!("{p}.weight"), l.weight.data().to_vec()));
            if let Some(b) = &l.bias {
                out.push((format!("{p}.bias"), b.data().to_vec()));
            }
            if let Some(n) = &l.norm {
                out.push((format!("{p}.norm.scale"), n.gamma.data().to_vec()));
                out.push((format!("{p}.norm.shift"), n.beta.data().to_vec()));
                out.push((format!("{p}.norm.running_mean"), n.running_mean.clone()));
                out.push((format!("{p}.norm.running_var"), n.running_var.clone()));
                out.push((format!("{p}.norm.momentum_eps"), vec![n.momentum, n.eps]));
            }
            out.push((format!("{p}.weight_step"), vec![l.weight_step.value, l.weight_step.g]));
            out.push((format!("{p}.act_step"), vec![l.act_step.value, l.act_step.g]));
        }
        for (k, v) in &self.extra {
            out.push((format!("extra.{k}"), v.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, values) in self.arrays() {
            entries.push(ArrayEntry {
                name,
                offset: payload.len(),
                len: values.len(),
            });
            fsio::f64s_to_le(&values, &mut payload);
        }
        let header = Header {
            config: self.model.config.clone(),
            config_hash: config_hash(&self.model.config),
            epoch: self.epoch,
            grad_scale: self.model.grad_scale,
            layers: self
                .model
                .layers
                .iter()
                .map(|l| LayerFlags {
                    weight_step_initialized: l.weight_step.initialized,
                    act_step_initialized: l.act_step.initialized,
                })
                .collect(),
            arrays: entries,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        Ok(fsio::write_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = fsio::read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Error::Checkpoint)?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if config_hash(&header.config) != header.config_hash {
            return Err(Error::Checkpoint("configuration hash mismatch".into()));
        }
        let mut model = build_model(&header.config, 0)?;
        if header.layers.len() != model.layers.len() {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        model.grad_scale = header.grad_scale;

        let mut arrays = BTreeMap::new();
        let mut expected_offset = 0;
        for e in &header.arrays {
            let end = e
                .len
                .checked_mul(8)
                .and_then(|b| b.checked_add(e.offset))
                .filter(|&end| end <= payload.len() && e.offset == expected_offset)
                .ok_or_else(|| Error::Checkpoint(format!("array '{}' outside payload", e.name)))?;
            expected_offset = end;
            arrays.insert(e.name.clone(), fsio::le_to_f64s(&payload[e.offset..end]));
        }
        if expected_offset != payload.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = arrays
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!(
                    "array '{name}' has {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };

        model.grad_scale_mult = take("grad_scale_mult", 1)?[0];
        for (i, (l, flags)) in model.layers.iter_mut().zip(&header.layers).enumerate() {
            let p = format!("layers.{i}");
            let w = take(&format!("{p}.weight"), l.weight.numel())?;
            l.weight.data_mut().copy_from_slice(&w);
            if let Some(b) = &mut l.bias {
                let v = take(&format!("{p}.bias"), b.numel())?;
                b.data_mut().copy_from_slice(&v);
            }
            if let Some(n) = &mut l.norm {
                let c = n.running_mean.len();
                n.gamma.data_mut().copy_from_slice(&take(&format!("{p}.norm.scale"), c)?);
                n.beta.data_mut().copy_from_slice(&take(&format!("{p}.norm.shift"), c)?);
                n.running_mean = take(&format!("{p}.norm.running_mean"), c)?;
                n.running_var = take(&format!("{p}.norm.running_var"), c)?;
                let me = take(&format!("{p}.norm.momentum_eps"), 2)?;
                n.momentum = me[0];
                n.eps = me[1];
            }
            let ws = take(&format!("{p}.weight_step"), 2)?;
            l.weight_step.value = ws[0];
            l.weight_step.g = ws[1];
            l.weight_step.initialized = flags.weight_step_initialized;
            let a = take(&format!("{p}.act_step"), 2)?;
            l.act_step.value = a[0];
            l.act_step.g = a[1];
            l.act_step.initialized = flags.act_step_initialized;
        }
        let mut extra = BTreeMap::new();
        for (name, v) in arrays {
            match name.strip_prefix("extra.") {
                Some(k) => {
                    extra.insert(k.to_string(), v);
                }
                None => return Err(Error::Checkpoint(format!("unexpected array '{name}'"))),
            }
        }
        Ok(Checkpoint {
            model,
            epoch: header.epoch,
            extra,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?)
    }
}
