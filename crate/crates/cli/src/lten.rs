//! The LTEN tensor container and the checkpoint file built on top of it.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! magic     "LTEN" (4 bytes)
//! version   u32 = 1
//! rank      u32
//! extents   rank x u64
//! dtype     u8 (0 = f32, 1 = f64)
//! payload   numel x dtype-size bytes
//! labels    count u64, then count x u32
//! ```
//!
//! Round trips are bit-exact. A checkpoint is a name index over embedded
//! LTEN records: magic "LCKP", version u32 = 1, count u64, then per entry a
//! u64 name length, the UTF-8 name, and a full LTEN record with no labels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use lite_core::{DType, ParamStore, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum LtenError {
    #[error("bad magic bytes (expected {expected})")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("dimension overflow: extents {extents:?}")]
    DimensionOverflow { extents: Vec<u64> },
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("labels length {labels} does not match leading extent {leading}")]
    LabelMismatch { labels: usize, leading: usize },
    #[error("checkpoint name is not valid UTF-8")]
    BadName,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw payload in its on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Convert into the engine scalar type (widening is exact; narrowing
    /// rounds).
    pub fn into_reals<R: Real>(self) -> Vec<R> {
        match self {
            TensorData::F32(v) => v.into_iter().map(|x| R::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.into_iter().map(R::from_f64).collect(),
        }
    }

    pub fn from_tensor<R: Real>(tensor: &Tensor<R>) -> Self {
        match R::DTYPE {
            DType::F32 => TensorData::F32(tensor.data().iter().map(|&v| v.to_f64() as f32).collect()),
            DType::F64 => TensorData::F64(tensor.data().iter().map(|&v| v.to_f64()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtenRecord {
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub labels: Vec<u32>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LtenError> {
        if self.pos + n > self.buf.len() {
            return Err(LtenError::Truncated { needed: self.pos + n - self.buf.len() });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, LtenError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, LtenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LtenError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"LTEN";
const CHECKPOINT_MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u32 = 1;

fn encode_record(out: &mut Vec<u8>, record: &LtenRecord) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(record.shape.len() as u32).to_le_bytes());
    for &e in &record.shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match &record.data {
        TensorData::F32(v) => {
            out.push(0);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            out.push(1);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(record.labels.len() as u64).to_le_bytes());
    for &l in &record.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
}

fn decode_record(r: &mut Reader) -> Result<LtenRecord, LtenError> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(LtenError::BadMagic { expected: "LTEN" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LtenError::UnsupportedVersion(version));
    }
    let rank = r.u32()? as usize;
    let mut extents_u64 = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents_u64.push(r.u64()?);
    }
    let mut numel: usize = 1;
    let mut shape = Vec::with_capacity(rank);
    for &e in &extents_u64 {
        let e_usize: usize = e
            .try_into()
            .map_err(|_| LtenError::DimensionOverflow { extents: extents_u64.clone() })?;
        numel = numel
            .checked_mul(e_usize)
            .ok_or_else(|| LtenError::DimensionOverflow { extents: extents_u64.clone() })?;
        shape.push(e_usize);
    }
    let dtype = r.u8()?;
    let data = match dtype {
        0 => {
            let bytes = r.take(numel * 4)?;
            TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )
        }
        1 => {
            let bytes = r.take(numel * 8)?;
            TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )
        }
        other => return Err(LtenError::BadDtype(other)),
    };
    let label_count = r.u64()? as usize;
    let label_bytes = r.take(label_count * 4)?;
    let labels: Vec<u32> =
        label_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    if label_count != 0 && rank > 0 && label_count != shape[0] {
        return Err(LtenError::LabelMismatch { labels: label_count, leading: shape[0] });
    }
    Ok(LtenRecord { shape, data, labels })
}

pub fn write_tensor_file(path: &Path, record: &LtenRecord) -> Result<(), LtenError> {
    let mut out = Vec::new();
    encode_record(&mut out, record);
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<LtenRecord, LtenError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut reader = Reader { buf: &bytes, pos: 0 };
    decode_record(&mut reader)
}

/// Write every parameter (sorted by name) into a checkpoint.
pub fn save_checkpoint<R: Real>(path: &Path, params: &ParamStore<R>) -> Result<(), LtenError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, param) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let record = LtenRecord {
            shape: param.value.shape().to_vec(),
            data: TensorData::from_tensor(&param.value),
            labels: Vec::new(),
        };
        encode_record(&mut out, &record);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, LtenRecord)>, LtenError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(LtenError::BadMagic { expected: "LCKP" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LtenError::UnsupportedVersion(version));
    }
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name_bytes = r.take(name_len)?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| LtenError::BadName)?.to_string();
        entries.push((name, decode_record(&mut r)?));
    }
    Ok(entries)
}

/// In-memory decode, used by tests and the reader round-trip.
pub fn decode_tensor_bytes(bytes: &[u8]) -> Result<LtenRecord, LtenError> {
    let mut reader = Reader { buf: bytes, pos: 0 };
    decode_record(&mut reader)
}

/// In-memory encode.
pub fn encode_tensor_bytes(record: &LtenRecord) -> Vec<u8> {
    let mut out = Vec::new();
    encode_record(&mut out, record);
    out
}
