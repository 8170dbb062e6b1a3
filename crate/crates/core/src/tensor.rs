//! Dense row-major tensors and the `.qt` binary blob format.
//!
//! Blob layout, all little-endian:
//!
//! ```text
//! magic "QTNSR1" (6 bytes) | dtype code (1) | rank (1) | dims (rank x u32) | payload
//! ```
//!
//! dtype codes: 0=F32, 1=I8, 2=U8, 3=I16, 4=I32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 6] = b"QTNSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    I8,
    U8,
    I16,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::U8 => 2,
            DType::I16 => 3,
            DType::I32 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::U8,
            3 => DType::I16,
            4 => DType::I32,
            _ => return None,
        })
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::I8 | DType::U8 => 1,
            DType::I16 => 2,
            DType::F32 | DType::I32 => 4,
        }
    }
}

/// Typed element storage. Element ranges are enforced by the Rust types.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::U8(_) => DType::U8,
            TensorData::I16(_) => DType::I16,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Bitwise equality: two F32 tensors holding the same NaN payload compare equal.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (a, b) => a == b,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::validation("tensor rank must be at least 1"));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::validation("tensor rank exceeds 255"));
        }
        if let Some(d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::validation(format!("invalid dimension {d} in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::validation(format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::validation(format!("expected F32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::validation(format!("expected F32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::validation(format!("expected F32 tensor, got {:?}", other.dtype()))),
        }
    }

    /// Integer elements widened to i32, in row-major order.
    pub fn to_i32_vec(&self) -> Result<Vec<i32>> {
        Ok(match &self.data {
            TensorData::I8(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::I16(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::I32(v) => v.clone(),
            TensorData::F32(_) => return Err(Error::validation("expected integer tensor, got F32")),
        })
    }

    /// Number of elements that are not exactly zero.
    pub fn count_nonzero(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.iter().filter(|&&x| x != 0.0).count(),
            TensorData::I8(v) => v.iter().filter(|&&x| x != 0).count(),
            TensorData::U8(v) => v.iter().filter(|&&x| x != 0).count(),
            TensorData::I16(v) => v.iter().filter(|&&x| x != 0).count(),
            TensorData::I32(v) => v.iter().filter(|&&x| x != 0).count(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn blob_len(&self) -> usize {
        8 + 4 * self.rank() + self.numel() * self.dtype().size_of()
    }
}

/// Writes `t` as a `.qt` blob and returns the number of bytes emitted.
pub fn write_blob<W: Write>(t: &Tensor, mut sink: W) -> Result<usize> {
    let mut buf = Vec::with_capacity(t.blob_len());
    buf.extend_from_slice(BLOB_MAGIC);
    buf.push(t.dtype().code());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::I8(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => buf.extend_from_slice(v),
        TensorData::I16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len())
}

/// Reads one blob. The stream must end exactly where the payload ends.
pub fn read_blob<R: Read>(mut source: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_blob(&bytes)
}

pub fn decode_blob(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::format("blob shorter than header"));
    }
    if &bytes[..6] != BLOB_MAGIC {
        return Err(Error::format("bad blob magic"));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::format(format!("unknown dtype code {}", bytes[6])))?;
    let rank = bytes[7] as usize;
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format("blob truncated inside dims"));
    }
    let shape: Vec<usize> =
        bytes[8..dims_end].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("blob shape overflows"))?;
    let payload = &bytes[dims_end..];
    let expected = numel.checked_mul(dtype.size_of()).ok_or_else(|| Error::format("blob shape overflows"))?;
    if payload.len() < expected {
        return Err(Error::format(format!("blob payload truncated: expected {expected} bytes, got {}", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::format(format!("{} trailing bytes after blob payload", payload.len() - expected)));
    }
    let data = match dtype {
        DType::F32 => {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        }
        DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::I16 => TensorData::I16(payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()),
        DType::I32 => {
            TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        }
    };
    Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))
}

pub fn save_blob(t: &Tensor, path: impl AsRef<Path>) -> Result<usize> {
    let file = File::create(path)?;
    write_blob(t, BufWriter::new(file))
}

pub fn load_blob(path: impl AsRef<Path>) -> Result<Tensor> {
    let file = File::open(path)?;
    read_blob(BufReader::new(file))
}
