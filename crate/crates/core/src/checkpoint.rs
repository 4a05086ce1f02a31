//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `KALIGNCK`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then raw little-endian
//! tensor data in header order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, Encoder, ModelConfig};
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"KALIGNCK";
const VERSION: u32 = 1;

pub const LOG_TAU: &str = "log_tau";
const OPTIM_PREFIX: &str = "optim.";

/// Position of training within its data streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// 0-based epoch in progress.
    pub epoch: usize,
    pub explicit_cursor: usize,
    pub implicit_cursor: usize,
    pub implicit_round: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adapter: Option<AdapterConfig>,
    dtype: String,
    vocab: Vec<String>,
    vocab_hash: String,
    train: TrainConfig,
    state: TrainState,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub dtype: DType,
    pub vocab: Vocab,
    pub train: TrainConfig,
    pub state: TrainState,
    /// Model parameters, `log_tau` and `optim.*` moment tensors.
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype '{other}'"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        DType::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn log_tau(&self) -> Result<f64> {
        let t = self
            .tensor(LOG_TAU)
            .ok_or_else(|| Error::Checkpoint("missing log_tau".into()))?;
        Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
    }

    pub fn model_tensors(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| n != LOG_TAU && !n.starts_with(OPTIM_PREFIX))
            .cloned()
            .collect()
    }

    pub fn optimizer_tensors(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(OPTIM_PREFIX))
            .cloned()
            .collect()
    }

    /// Rebuild the encoder, with adapters attached when the checkpoint has
    /// them.
    pub fn encoder(&self) -> Result<Encoder> {
        let mut enc = Encoder::new(self.model, self.dtype)?;
        if let Some(a) = self.adapter {
            enc.attach_adapters(a)?;
        }
        enc.load_parameters(&self.model_tensors())?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.into(),
                shape: t.dims().to_vec(),
            });
            data.extend(tensor_bytes(t)?);
        }
        let header = Header {
            model: self.model,
            adapter: self.adapter,
            dtype: dtype_name(self.dtype)?.into(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_hash: self.vocab.hash(),
            train: self.train.clone(),
            state: self.state,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bytes = Vec::with_capacity(20 + json.len() + data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&data);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        if vocab.hash() != header.vocab_hash {
            return Err(bad("vocabulary hash mismatch"));
        }
        let mut offset = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let dtype = parse_dtype(&e.dtype)?;
            let n: usize = e.shape.iter().product::<usize>() * dtype.size_in_bytes();
            let raw = bytes
                .get(offset..offset + n)
                .ok_or_else(|| bad(&format!("truncated data for '{}'", e.name)))?;
            tensors.push((e.name, tensor_from_bytes(raw, dtype, &e.shape)?));
            offset += n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model: header.model,
            adapter: header.adapter,
            dtype: parse_dtype(&header.dtype)?,
            vocab,
            train: header.train,
            state: header.state,
            tensors,
        })
    }
}
