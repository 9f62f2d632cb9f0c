//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MASTCKPT`, `u32` version, `u32` metadata
//! length, UTF-8 JSON metadata, `u32` array count, then per array a `u16`
//! name length, the name, a `u8` dtype code, a `u8` rank, `u64` extents and
//! the raw values at the array's own float width.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::OpId;
use crate::config::Config;
use crate::error::{MastError, Result};
use crate::model::Model;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"MASTCKPT";
pub const VERSION: u32 = 1;

/// Reproducibility state: every random draw of training derives from the
/// seed and the global step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng: RngState,
    pub dtype: DType,
    /// Operator owning each mask column.
    pub augmentations: Vec<OpId>,
}

/// One stored array, still at its stored width.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl StoredArray {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes: T::to_le_bytes_vec(t.data()),
        }
    }

    /// Values at width `T`; exact when `T` matches the stored width.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let values: Vec<f64> = match self.dtype {
            DType::F32 if T::DTYPE == DType::F32 => {
                return Tensor::new(self.shape.clone(), T::from_le_bytes_slice(&self.bytes));
            }
            DType::F64 if T::DTYPE == DType::F64 => {
                return Tensor::new(self.shape.clone(), T::from_le_bytes_slice(&self.bytes));
            }
            DType::F32 => f32::from_le_bytes_slice(&self.bytes).into_iter().map(f64::from).collect(),
            DType::F64 => f64::from_le_bytes_slice(&self.bytes),
        };
        Tensor::from_f64(self.shape.clone(), &values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<StoredArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&StoredArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            if name.len() > u16::MAX as usize || a.shape.len() > u8::MAX as usize {
                return Err(MastError::Format(format!("array `{}` cannot be encoded", a.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.dtype.code());
            out.push(a.shape.len() as u8);
            for &e in &a.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&a.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(MastError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MastError::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| MastError::Format("array name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype =
                DType::from_code(code).ok_or_else(|| MastError::Format(format!("unknown dtype code {code}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.take(n * dtype.byte_width())?.to_vec();
            arrays.push(StoredArray {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(MastError::Format("trailing bytes after checkpoint arrays".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| MastError::io("creating checkpoint directory", dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| MastError::io("writing checkpoint", path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MastError::io("reading checkpoint", path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model stored under `param.*` names.
    pub fn model<T: Element>(&self) -> Result<Model<T>> {
        let cfg = self.meta.config.model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::<T>::new(&mut rng, cfg, self.meta.augmentations.len())?;
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("param.{name}");
            let a = self
                .array(&key)
                .ok_or_else(|| MastError::Format(format!("checkpoint lacks `{key}`")))?;
            model.set_param(&name, a.to_tensor()?)?;
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MastError::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
