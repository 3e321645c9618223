//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, preprocessing, optimizer state metadata, tensor
//! directory), then every tensor as little-endian `f64` in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::model::{FpBiLstm, ModelConfig};
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FPBLSTM\0";
pub const VERSION: u32 = 1;

/// How raw frames become model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub features: FeatureConfig,
    pub window_s: f64,
    /// Native sample rate of the raw frames.
    pub sample_rate_hz: f64,
}

impl Pipeline {
    pub fn target_hz(&self) -> f64 {
        self.sample_rate_hz / self.features.downsample_s as f64
    }

    /// Model input length for one window.
    pub fn input_len(&self) -> usize {
        (self.window_s * self.sample_rate_hz).round() as usize / self.features.downsample_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    lr: f64,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    pipeline: Pipeline,
    optimizer: Option<OptimizerMeta>,
    best_epoch: Option<usize>,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FpBiLstm,
    pub pipeline: Pipeline,
    pub optimizer: Option<Adam>,
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let mut tensors = Vec::new();
        let mut data: Vec<&[f64]> = Vec::new();
        for p in store.params() {
            tensors.push(Entry { name: p.name.clone(), kind: Kind::Param, shape: p.value.shape().to_vec() });
            data.push(p.value.data());
        }
        for b in store.buffers() {
            tensors.push(Entry { name: b.name.clone(), kind: Kind::Buffer, shape: b.value.shape().to_vec() });
            data.push(b.value.data());
        }
        if let Some(adam) = &self.optimizer {
            for (kind, moments) in [(Kind::AdamM, &adam.m), (Kind::AdamV, &adam.v)] {
                for (p, m) in store.params().iter().zip(moments) {
                    tensors.push(Entry { name: p.name.clone(), kind, shape: p.value.shape().to_vec() });
                    data.push(m);
                }
            }
        }
        let header = Header {
            model: self.model.config().clone(),
            pipeline: self.pipeline.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta { config: a.config, lr: a.lr, step: a.step }),
            best_epoch: self.best_epoch,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = data.iter().map(|d| d.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut rest = &body[hlen..];
        let mut store = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated data for tensor {}", e.name)));
            }
            let values: Vec<f64> = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            match e.kind {
                Kind::Param => {
                    store.add_param(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
                }
                Kind::Buffer => {
                    store.add_buffer(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
                }
                Kind::AdamM => m.push(values),
                Kind::AdamV => v.push(values),
            }
        }
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after tensor data", rest.len())));
        }
        let n_params = store.params().len();
        let model = FpBiLstm::from_store(header.model, store)?;
        let optimizer = match header.optimizer {
            Some(meta) => {
                if m.len() != n_params || v.len() != n_params {
                    return Err(bad("optimizer moments do not cover every parameter"));
                }
                Some(Adam { config: meta.config, lr: meta.lr, step: meta.step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint { model, pipeline: header.pipeline, optimizer, best_epoch: header.best_epoch })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
