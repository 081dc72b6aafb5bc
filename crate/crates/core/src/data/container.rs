//! OCBT tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 0..4  | magic `4F 43 42 54` ("OCBT")             |
//! | 4     | version, always 1                        |
//! | 5     | dtype: 1=f32, 2=u8, 3=i64, 4=f64         |
//! | 6     | ndim                                     |
//! | 7     | reserved, zero                           |
//! | 8..   | `ndim` u64 dimensions, then the row-major payload |

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OCBT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
    I64 = 3,
    F64 = 4,
}

impl DType {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            3 => Some(DType::I64),
            4 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }
}

/// A dynamically typed tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    I64(ArrayD<i64>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::U8(_) => DType::U8,
            Tensor::I64(_) => DType::I64,
            Tensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
            Tensor::I64(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.len() + numel * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(shape.len() as u8);
        out.push(0);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        // `iter()` walks logical row-major order regardless of memory layout.
        match self {
            Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::U8(a) => out.extend(a.iter().copied()),
            Tensor::I64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    /// Parses a complete tensor file image. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("file too short ({} bytes)", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(bad(format!("bad magic {:02X?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_byte(bytes[5]).ok_or_else(|| bad(format!("unknown dtype byte {}", bytes[5])))?;
        let ndim = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(bad("reserved header byte is not zero".into()));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(bad("truncated dimension list".into()));
        }
        let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows".into()))?;
        let payload = &bytes[dims_end..];
        let expected = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| bad("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(bad(format!(
                "payload is {} bytes, shape {:?} of {:?} needs {}",
                payload.len(),
                shape,
                dtype,
                expected
            )));
        }
        let dim = IxDyn(&shape);
        let tensor = match dtype {
            DType::F32 => Tensor::F32(ArrayD::from_shape_vec(
                dim,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .unwrap()),
            DType::U8 => Tensor::U8(ArrayD::from_shape_vec(dim, payload.to_vec()).unwrap()),
            DType::I64 => Tensor::I64(ArrayD::from_shape_vec(
                dim,
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .unwrap()),
            DType::F64 => Tensor::F64(ArrayD::from_shape_vec(
                dim,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .unwrap()),
        };
        Ok(tensor)
    }

    pub fn into_f32(self, path: &Path) -> Result<ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(Error::format(path, format!("expected f32, found {:?}", other.dtype()))),
        }
    }

    pub fn into_u8(self, path: &Path) -> Result<ArrayD<u8>> {
        match self {
            Tensor::U8(a) => Ok(a),
            other => Err(Error::format(path, format!("expected u8, found {:?}", other.dtype()))),
        }
    }

    pub fn into_i64(self, path: &Path) -> Result<ArrayD<i64>> {
        match self {
            Tensor::I64(a) => Ok(a),
            other => Err(Error::format(path, format!("expected i64, found {:?}", other.dtype()))),
        }
    }

    pub fn into_f64(self, path: &Path) -> Result<ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::format(path, format!("expected f64, found {:?}", other.dtype()))),
        }
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = tensor.to_bytes();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file. A missing file is a format error: the manifest that
/// pointed here is inconsistent with the directory contents.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, "referenced tensor file does not exist")
        } else {
            Error::io(path, e)
        }
    })?;
    Tensor::from_bytes(&bytes, path)
}
