//! Checkpoint files.
//!
//! | offset | bytes | content                                        |
//! |--------|-------|------------------------------------------------|
//! | 0      | 4     | magic `DSCK`                                   |
//! | 4      | 4     | header length H, u32 little-endian             |
//! | 8      | H     | JSON header ([`CheckpointHeader`])             |
//! | 8 + H  | rest  | f32 little-endian arrays, in header order      |
//!
//! Arrays are the encoder parameters, then Adam first and second moments
//! (`adam.m.*`, `adam.v.*`), then `codebook.centroids`. The header carries
//! a SHA-256 of the configs and of the payload; both are checked on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig};
use crate::audio::{Codebook, CodebookHeader};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::Tensor;
use crate::vocab::VocabFile;

const MAGIC: &[u8; 4] = b"DSCK";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: u32,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub vocab: VocabFile,
    pub codebook: CodebookHeader,
    pub optimizer_step: u64,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
}

/// Everything needed to resume training or to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: EncoderParams<f32>,
    pub optimizer: AdamState<f32>,
    pub vocab: VocabFile,
    pub codebook: Codebook,
}

/// SHA-256 over the JSON of both configs.
pub fn config_hash(encoder: &EncoderConfig, train: &TrainConfig) -> Result<String> {
    let bytes = serde_json::to_vec(&(encoder, train))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_layout(&self.encoder)?;
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            arrays.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
            });
            payload.extend(fsutil::f32_le_bytes(t.data().iter().copied()));
        };
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            push(n.clone(), t);
        }
        for (n, t) in self.params.names.iter().zip(&self.optimizer.m) {
            push(format!("adam.m.{n}"), t);
        }
        for (n, t) in self.params.names.iter().zip(&self.optimizer.v) {
            push(format!("adam.v.{n}"), t);
        }
        let cb = Tensor::new(
            &[self.codebook.k(), self.codebook.dim()],
            self.codebook.centroids().to_vec(),
        )?;
        push("codebook.centroids".into(), &cb);
        let header = CheckpointHeader {
            format: FORMAT,
            step: self.step,
            seed: self.train.seed,
            config_hash: config_hash(&self.encoder, &self.train)?,
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            codebook: self.codebook.header(),
            optimizer_step: self.optimizer.step,
            arrays,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        Ok(fsutil::frame_with_json_header(MAGIC, &header, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = fsutil::split_json_header(MAGIC, bytes, "checkpoint")?;
        let h: CheckpointHeader = serde_json::from_slice(header)
            .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
        if h.format != FORMAT {
            return Err(Error::Integrity(format!(
                "checkpoint format {} is not supported",
                h.format
            )));
        }
        if hex::encode(Sha256::digest(payload)) != h.payload_sha256 {
            return Err(Error::Integrity("checkpoint payload checksum mismatch".into()));
        }
        if config_hash(&h.encoder, &h.train)? != h.config_hash {
            return Err(Error::Integrity("checkpoint config hash mismatch".into()));
        }
        let expected: usize = h.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 4 {
            return Err(Error::Integrity(format!(
                "checkpoint payload has {} bytes, arrays need {}",
                payload.len(),
                expected * 4
            )));
        }
        let values = fsutil::f32_from_le(payload);
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(h.arrays.len());
        for a in &h.arrays {
            let n: usize = a.shape.iter().product();
            tensors.push(Tensor::new(&a.shape, values[offset..offset + n].to_vec())?);
            offset += n;
        }
        let n_params = h.encoder.layout().len();
        if tensors.len() != 3 * n_params + 1 {
            return Err(Error::Integrity(format!(
                "checkpoint has {} arrays, expected {}",
                tensors.len(),
                3 * n_params + 1
            )));
        }
        let centroids = tensors.pop().expect("codebook array").into_data();
        let v = tensors.split_off(2 * n_params);
        let m = tensors.split_off(n_params);
        let params = EncoderParams {
            names: h.arrays[..n_params].iter().map(|a| a.name.clone()).collect(),
            tensors,
        };
        params.check_layout(&h.encoder)?;
        let codebook = Codebook::new(
            h.codebook.k,
            h.codebook.dim,
            centroids,
            h.codebook.frame_rate_hz,
            h.codebook.seed,
        )?;
        Ok(Self {
            encoder: h.encoder,
            train: h.train,
            step: h.step,
            params,
            optimizer: AdamState {
                m,
                v,
                step: h.optimizer_step,
            },
            vocab: h.vocab,
            codebook,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }

    /// Fail unless this checkpoint was produced under exactly these configs.
    pub fn ensure_config(&self, encoder: &EncoderConfig, train: &TrainConfig) -> Result<()> {
        if config_hash(encoder, train)? != config_hash(&self.encoder, &self.train)? {
            return Err(Error::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        Ok(())
    }
}
