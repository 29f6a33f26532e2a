//! Binary checkpoint: magic, manifest length (u64 LE), JSON manifest, then
//! little-endian f64 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout, Adam, AdamState, ModelConfig, ModelParams, TensorSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MAGIC: &[u8; 8] = b"ORBPRED\0";

/// Optimizer and bookkeeping needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub weights: LossWeights,
    pub adam: Adam,
    pub adam_state: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub train: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct TrainManifest {
    epoch: usize,
    best_val: Option<f64>,
    weights: LossWeights,
    adam: Adam,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
    /// Payload sections in order, each `num_values` long.
    sections: Vec<String>,
    train: Option<TrainManifest>,
    payload_values: usize,
    checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections = vec!["params".to_string()];
        let mut values = self.params.to_flat();
        if let Some(t) = &self.train {
            sections.push("adam_m".into());
            sections.push("adam_v".into());
            values.extend(t.adam_state.m.to_flat());
            values.extend(t.adam_state.v.to_flat());
        }
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = Manifest {
            schema_version: CHECKPOINT_SCHEMA,
            config: self.config,
            tensors: self.params.manifest().to_vec(),
            sections,
            train: self.train.as_ref().map(|t| TrainManifest {
                epoch: t.epoch,
                best_val: t.best_val,
                weights: t.weights,
                adam: t.adam,
                adam_step: t.adam_state.step,
            }),
            payload_values: values.len(),
            checksum: fnv1a(&payload),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(schema("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| schema("truncated checkpoint manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| schema(format!("bad checkpoint manifest: {e}")))?;
        if manifest.schema_version != CHECKPOINT_SCHEMA {
            return Err(schema(format!(
                "checkpoint schema {} (expected {CHECKPOINT_SCHEMA})",
                manifest.schema_version
            )));
        }
        manifest.config.validate()?;
        let (_, specs) = layout(&manifest.config);
        if specs != manifest.tensors {
            return Err(schema("tensor manifest does not match the model configuration"));
        }
        let payload = &bytes[16 + len..];
        if payload.len() != manifest.payload_values * 8 {
            return Err(schema(format!(
                "payload has {} bytes, manifest promises {} values",
                payload.len(),
                manifest.payload_values
            )));
        }
        if fnv1a(payload) != manifest.checksum {
            return Err(schema("checkpoint checksum mismatch"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected_sections: &[&str] = if manifest.train.is_some() {
            &["params", "adam_m", "adam_v"]
        } else {
            &["params"]
        };
        if manifest.sections != expected_sections {
            return Err(schema("unexpected checkpoint sections"));
        }
        let count: usize = specs.iter().map(TensorSpec::len).sum();
        if values.len() != count * expected_sections.len() {
            return Err(schema("payload length does not match the tensor manifest"));
        }
        let cfg = manifest.config;
        let section = |k: usize| ModelParams::from_flat(&cfg, &values[k * count..(k + 1) * count]);
        let params = section(0)?;
        let train = match manifest.train {
            Some(t) => Some(TrainState {
                epoch: t.epoch,
                best_val: t.best_val,
                weights: t.weights,
                adam: t.adam,
                adam_state: AdamState {
                    step: t.adam_step,
                    m: section(1)?,
                    v: section(2)?,
                },
            }),
            None => None,
        };
        Ok(Checkpoint { config: cfg, params, train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dim: 5,
            gnn_layers: 2,
            proj_dim: 3,
            kernel_hidden: 4,
            readout_hidden: 6,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn with_state() -> Checkpoint {
        let cfg = small();
        let params = init_params(&cfg).unwrap();
        let mut adam_state = AdamState::new(&cfg);
        adam_state.m.axpy(0.3, &params);
        adam_state.v.axpy(1.0 / 3.0, &params);
        adam_state.step = 17;
        Checkpoint {
            config: cfg,
            params,
            train: Some(TrainState {
                epoch: 4,
                best_val: Some(0.123_456_789_012_345_6),
                weights: LossWeights::default(),
                adam: Adam::default(),
                adam_state,
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = with_state();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let bare = Checkpoint { train: None, ..ck };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = with_state();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = with_state().to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Schema(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Schema(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"garbage"), Err(Error::Schema(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Schema(_))));
    }
}
