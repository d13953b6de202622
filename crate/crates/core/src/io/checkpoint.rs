//! Checkpoint files.
//!
//! ```text
//! "SVQC" | header length u32 LE | JSON header | body
//! ```
//! The header holds the format version, stage tag, config snapshot, epoch,
//! dataset score ranges, the fitted decoder and an index of tensors
//! (name, shape, byte offset and length into the body). The body is the
//! tensors' `f64` values, little-endian, in index order. Optimizer
//! velocities are stored as tensors named `velocity:<parameter>`.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::encoder::Mode;
use crate::error::{Error, FormatError, Result};
use crate::model::ModelWeights;
use crate::regression::{MosRange, SvrDecoder};
use crate::tensor::{SgdMomentum, Tensor};

pub const MAGIC: &[u8; 4] = b"SVQC";
pub const FORMAT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Mode,
    pub config: TrainConfig,
    pub epoch: usize,
    pub datasets: IndexMap<String, MosRange>,
    pub decoder: Option<SvrDecoder>,
    pub weights: ModelWeights,
    pub optimizer: SgdMomentum,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    stage: Mode,
    config: TrainConfig,
    epoch: usize,
    datasets: IndexMap<String, MosRange>,
    decoder: Option<SvrDecoder>,
    tensors: Vec<TensorEntry>,
}

fn tensor_err(name: &str, message: impl Into<String>) -> Error {
    FormatError::Tensor {
        name: name.to_string(),
        message: message.into(),
    }
    .into()
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        weights: ModelWeights,
        optimizer: SgdMomentum,
        epoch: usize,
        datasets: IndexMap<String, MosRange>,
        decoder: Option<SvrDecoder>,
    ) -> Self {
        Self {
            stage: weights.mode,
            config,
            epoch,
            datasets,
            decoder,
            weights,
            optimizer,
        }
    }

    /// Fails unless this checkpoint was produced by the `expected` stage.
    pub fn expect_stage(&self, expected: Mode) -> Result<()> {
        if self.stage != expected {
            return Err(FormatError::Stage {
                expected: expected.to_string(),
                found: self.stage.to_string(),
            }
            .into());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut body = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: body.len(),
                length: data.len() * 8,
            });
            for v in data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.weights.params() {
            push(name.clone(), t.shape().to_vec(), t.data());
        }
        for (name, v) in self.optimizer.velocities() {
            let shape = self
                .weights
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![v.len()]);
            push(format!("{VELOCITY_PREFIX}{name}"), shape, v);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            epoch: self.epoch,
            datasets: self.datasets.clone(),
            decoder: self.decoder.clone(),
            tensors,
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + text.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        if bytes.len() < 8 {
            return Err(FormatError::TruncatedHeader.into());
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let Some(text) = bytes.get(8..8 + header_len) else {
            return Err(FormatError::TruncatedHeader.into());
        };
        let header: Header = serde_json::from_slice(text)
            .map_err(|e| FormatError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(FormatError::Version {
                expected: FORMAT_VERSION,
                found: header.format_version,
            }
            .into());
        }
        let body = &bytes[8 + header_len..];
        let model_cfg = &header.config.model;
        model_cfg
            .validate()
            .map_err(|e| FormatError::Header(format!("config snapshot: {e}")))?;
        let expected = model_cfg.param_shapes(header.stage);

        let mut params = IndexMap::new();
        let mut velocities = IndexMap::new();
        let mut cursor = 0;
        for entry in &header.tensors {
            let name = entry.name.as_str();
            let param = name.strip_prefix(VELOCITY_PREFIX).unwrap_or(name);
            let Some(shape) = expected.get(param) else {
                return Err(tensor_err(name, "not a parameter of the configured model"));
            };
            if &entry.shape != shape {
                return Err(tensor_err(
                    name,
                    format!("header shape {:?} does not match config shape {shape:?}", entry.shape),
                ));
            }
            let count: usize = shape.iter().product();
            if entry.length != count * 8 {
                return Err(tensor_err(
                    name,
                    format!("length {} bytes, shape needs {}", entry.length, count * 8),
                ));
            }
            if entry.offset != cursor {
                return Err(tensor_err(
                    name,
                    format!("offset {} breaks contiguous layout (expected {cursor})", entry.offset),
                ));
            }
            let Some(raw) = body.get(cursor..cursor + entry.length) else {
                return Err(FormatError::TruncatedPayload {
                    expected: cursor + entry.length,
                    found: body.len(),
                }
                .into());
            };
            cursor += entry.length;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let target = if name.starts_with(VELOCITY_PREFIX) {
                &mut velocities
            } else {
                &mut params
            };
            if target.contains_key(param) {
                return Err(tensor_err(name, "listed twice"));
            }
            target.insert(param.to_string(), (shape.clone(), data));
        }
        if body.len() > cursor {
            return Err(FormatError::TrailingBytes {
                extra: body.len() - cursor,
            }
            .into());
        }
        if let Some(missing) = expected.keys().find(|k| !params.contains_key(*k)) {
            return Err(tensor_err(missing, "missing from checkpoint"));
        }
        let params = params
            .into_iter()
            .map(|(name, (shape, data))| {
                let t = Tensor::new(shape, data).map_err(|e| tensor_err(&name, e.to_string()))?;
                Ok((name, t))
            })
            .collect::<Result<IndexMap<_, _>>>()?;
        let weights = ModelWeights::from_params(model_cfg, header.stage, params)?;
        let mut optimizer = SgdMomentum::new(header.config.momentum);
        for (name, (_, data)) in velocities {
            optimizer.set_velocity(&name, data);
        }
        Ok(Self {
            stage: header.stage,
            config: header.config,
            epoch: header.epoch,
            datasets: header.datasets,
            decoder: header.decoder,
            weights,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and requires its stage tag to be `stage`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, stage: Mode) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_stage(stage)?;
    Ok(ckpt)
}
