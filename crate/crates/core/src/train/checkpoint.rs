//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then every tensor as little-endian `f32` in header order. Optimizer
//! moments, when present, follow the weights as `adamw.m.*` and `adamw.v.*`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use super::{Result, TrainError};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"TTCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Batch streams are keyed by `(seed, step)`, so this is the whole RNG state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights<f32>,
    pub step: u64,
    pub optimizer: Option<AdamW>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    parameter_count: usize,
    optimizer: Option<OptimizerHeader>,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(m: impl Into<String>) -> TrainError {
    TrainError::Format(m.into())
}

/// Parameter count recorded in a checkpoint header, read without loading tensors.
pub fn header_parameter_count(bytes: &[u8]) -> Result<usize> {
    Ok(parse_header(bytes)?.0.parameter_count)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(format!("header: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    if version != FORMAT_VERSION as u64 {
        return Err(TrainError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| bad(format!("header: {e}")))?;
    Ok((header, end))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs: Vec<(String, &Tensor<f32>)> =
            self.weights.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            let names: Vec<&String> = self.weights.iter().map(|(n, _)| n).collect();
            for (prefix, list) in [("adamw.m", &opt.m), ("adamw.v", &opt.v)] {
                for (n, t) in names.iter().zip(list) {
                    blobs.push((format!("{prefix}.{n}"), t));
                }
            }
        }
        let data: Vec<Vec<u8>> = blobs.iter().map(|(_, t)| le_bytes(t)).collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            parameter_count: self.weights.parameter_count(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: "adamw".into(),
                config: o.config,
                step: o.step,
            }),
            rng: self.rng,
            tensors: blobs
                .iter()
                .zip(&data)
                .map(|((name, t), d)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    sha256: hex(&Sha256::digest(d)),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out =
            Vec::with_capacity(16 + json.len() + data.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in data {
            out.extend_from_slice(&d);
        }
        out
    }

    /// Parses a checkpoint. With `expected`, the stored config must match it
    /// exactly; the error names the first differing field.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let (header, mut pos) = parse_header(bytes)?;
        if let Some(want) = expected {
            if let Some(field) = header.config.first_difference(want) {
                return Err(TrainError::ConfigMismatch(field.to_string()));
            }
        }
        let mut tensors = IndexMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos
                .checked_add(4 * n)
                .filter(|&x| x <= bytes.len())
                .ok_or_else(|| bad(format!("tensor {} is truncated", e.name)))?;
            let raw = &bytes[pos..end];
            if hex(&Sha256::digest(raw)) != e.sha256 {
                return Err(TrainError::Checksum(e.name.clone()));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }

        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut weights = IndexMap::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("adamw.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adamw.v.") {
                v.push((rest.to_string(), t));
            } else {
                weights.insert(name, t);
            }
        }
        let weights = ModelWeights::from_tensors(&header.config, weights)?;
        let optimizer = match header.optimizer {
            None => {
                if !m.is_empty() || !v.is_empty() {
                    return Err(bad("optimizer moments without optimizer header"));
                }
                None
            }
            Some(h) => {
                if h.kind != "adamw" {
                    return Err(bad(format!("unknown optimizer {}", h.kind)));
                }
                for list in [&m, &v] {
                    let ok = list.len() == weights.len()
                        && list
                            .iter()
                            .zip(weights.iter())
                            .all(|((n, t), (wn, w))| n == wn && t.shape() == w.shape());
                    if !ok {
                        return Err(bad("optimizer moments do not match the weights"));
                    }
                }
                Some(AdamW {
                    config: h.config,
                    step: h.step,
                    m: m.into_iter().map(|(_, t)| t).collect(),
                    v: v.into_iter().map(|(_, t)| t).collect(),
                })
            }
        };
        if header.parameter_count != weights.parameter_count() {
            return Err(bad("parameter count in header does not match tensors"));
        }
        Ok(Checkpoint {
            config: header.config,
            weights,
            step: header.step,
            optimizer,
            rng: header.rng,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| TrainError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, expected)
}
