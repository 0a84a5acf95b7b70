//! Named parameter store with seeded initialization and the checkpoint
//! container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SVCK"            magic
//! u32               format version (1)
//! u32 + bytes       config hash, ASCII hex
//! u64               training step
//! u32 + bytes       model config, JSON
//! u32               tensor count
//! per tensor:
//!   u32 + bytes     name, UTF-8
//!   u32             rank
//!   u64 × rank      dims
//!   f32 × numel     values, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;

pub(crate) enum Init {
    /// Uniform in `±bound`.
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    /// Creation order; defines the initialization stream.
    order: Vec<String>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Domain(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| match init {
                Init::Uniform(b) => self.rng.random_range(-b..=b),
                Init::Normal(sd) => sd * self.rng.sample::<f64, _>(StandardNormal),
                Init::Const(c) => c,
            })
            .collect();
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.order.push(name.to_string());
        Ok(handle)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().abs()?.to_dtype(DType::F64)?.max_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reads element `index` of a parameter as f64.
    pub fn value_at(&self, name: &str, index: usize) -> Result<f64> {
        let var = self.var(name)?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.get(index)?.to_scalar::<f64>()?)
    }

    /// Overwrites element `index` of a parameter.
    pub fn set_value_at(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self.var(name)?;
        let mut data = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        data[index] = value;
        let t = Tensor::from_vec(data, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Domain(format!("no parameter named {name}")))
    }

    /// Serializes parameters with their metadata.
    pub fn encode_checkpoint(&self, config_hash: &str, step: u64, config_json: &str) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, config_hash.as_bytes());
        out.extend_from_slice(&step.to_le_bytes());
        put_bytes(&mut out, config_json.as_bytes());
        out.extend_from_slice(&(self.vars.len() as u32).to_le_bytes());
        for (name, var) in &self.vars {
            put_bytes(&mut out, name.as_bytes());
            let dims = var.dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Loads tensors from a checkpoint into this store; names and shapes
    /// must match exactly.
    pub fn load_tensors(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.vars.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                ckpt.tensors.len(),
                self.vars.len()
            )));
        }
        for (name, (dims, values)) in &ckpt.tensors {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if var.dims() != dims.as_slice() {
                return Err(Error::Format(format!("tensor {name}: shape {dims:?}, model has {:?}", var.dims())));
            }
            let t = Tensor::from_vec(values.clone(), dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub config_json: String,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn truncated() -> Error {
    Error::Format("checkpoint truncated".into())
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = read_u32(r)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(truncated());
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated())?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut r = Cursor::new(bytes);
        r.set_position(4);
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = read_string(&mut r)?;
        let step = read_u64(&mut r)?;
        let config_json = read_string(&mut r)?;
        let n = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if numel.checked_mul(4).is_none_or(|b| b > remaining) {
                return Err(truncated());
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| truncated())?;
                values.push(f32::from_le_bytes(b));
            }
            tensors.insert(name, (dims, values));
        }
        if r.position() as usize != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config_hash, step, config_json, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
