// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `RSDT` binary tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"RSDT"
//! 4       4           version (u32, = 1)
//! 8       1           dtype   (0 = f32, 1 = f64)
//! 9       1           ndim    (≥ 1)
//! 10      2           padding (zero)
//! 12      8·ndim      dims    (u64 each, outermost first)
//! ..      n·size      payload (row-major IEEE-754)
//! ```
//!
//! Every integer and scalar is little-endian. The file must end exactly where
//! the payload does.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"RSDT";
pub const VERSION: u32 = 1;
/// Bytes before the dims array.
pub const FIXED_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"RSDT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("non-zero header padding")]
    BadPadding,
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("tensor must have at least one dimension")]
    ZeroRank,
    #[error("dimension {axis} has size 0")]
    ZeroDim { axis: usize },
    #[error("{0} dimensions do not fit the header")]
    TooManyDims(usize),
    #[error("dims describe {expected} values but payload has {actual}")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("expected a rank-{expected} tensor, found rank {found}")]
    WrongRank { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, FormatError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(FormatError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    /// Values widened to `f64` (analysis always runs in double precision).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::F64(v) => v.clone(),
        }
    }
}

/// A validated n-dimensional array: `product(dims) == payload.len()`,
/// `ndim ≥ 1`, every dim `≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    dims: Vec<usize>,
    payload: Payload,
}

impl TensorRecord {
    pub fn new(dims: Vec<usize>, payload: Payload) -> Result<Self, FormatError> {
        let expected = checked_volume(&dims)?;
        if expected != payload.len() {
            return Err(FormatError::PayloadMismatch {
                expected,
                actual: payload.len(),
            });
        }
        Ok(TensorRecord { dims, payload })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self, FormatError> {
        Self::new(alloc::vec![m.rows(), m.cols()], Payload::F64(m.as_slice().to_vec()))
    }

    /// Stores a matrix at single precision (lossy).
    pub fn from_matrix_f32(m: &Matrix) -> Result<Self, FormatError> {
        Self::new(
            alloc::vec![m.rows(), m.cols()],
            Payload::F32(m.as_slice().iter().map(|&x| x as f32).collect()),
        )
    }

    /// Stacks equally shaped matrices into a rank-3 tensor (e.g. heads×S×S).
    pub fn from_stack(stack: &[Matrix]) -> Result<Self, FormatError> {
        let (r, c) = stack.first().map_or((0, 0), Matrix::shape);
        let mut data = Vec::with_capacity(stack.len() * r * c);
        for m in stack {
            if m.shape() != (r, c) {
                return Err(FormatError::PayloadMismatch {
                    expected: r * c,
                    actual: m.rows() * m.cols(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        Self::new(alloc::vec![stack.len(), r, c], Payload::F64(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn to_matrix(&self) -> Result<Matrix, FormatError> {
        if self.ndim() != 2 {
            return Err(FormatError::WrongRank {
                expected: 2,
                found: self.ndim(),
            });
        }
        Ok(Matrix::from_vec(self.dims[0], self.dims[1], self.payload.to_f64()).expect("validated volume"))
    }

    pub fn to_stack(&self) -> Result<Vec<Matrix>, FormatError> {
        if self.ndim() != 3 {
            return Err(FormatError::WrongRank {
                expected: 3,
                found: self.ndim(),
            });
        }
        let (n, r, c) = (self.dims[0], self.dims[1], self.dims[2]);
        let flat = self.payload.to_f64();
        Ok((0..n)
            .map(|i| Matrix::from_vec(r, c, flat[i * r * c..(i + 1) * r * c].to_vec()).expect("validated volume"))
            .collect())
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + 8 * self.ndim() + self.payload.len() * self.dtype().size()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.ndim() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(FormatError::Truncated {
                    needed: n,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        need(FIXED_HEADER_LEN)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(bytes[8])?;
        let ndim = usize::from(bytes[9]);
        if bytes[10] != 0 || bytes[11] != 0 {
            return Err(FormatError::BadPadding);
        }
        if ndim == 0 {
            return Err(FormatError::ZeroRank);
        }
        let dims_end = FIXED_HEADER_LEN + 8 * ndim;
        need(dims_end)?;
        let dims = bytes[FIXED_HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| {
                let d = u64::from_le_bytes(c.try_into().expect("8 bytes"));
                usize::try_from(d).map_err(|_| FormatError::TooManyDims(ndim))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let count = checked_volume(&dims)?;
        let payload_len = count.checked_mul(dtype.size()).ok_or(FormatError::TooManyDims(ndim))?;
        let end = dims_end
            .checked_add(payload_len)
            .ok_or(FormatError::TooManyDims(ndim))?;
        need(end)?;
        if bytes.len() > end {
            return Err(FormatError::TrailingBytes(bytes.len() - end));
        }
        let body = &bytes[dims_end..end];
        let payload = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        TensorRecord::new(dims, payload)
    }
}

fn checked_volume(dims: &[usize]) -> Result<usize, FormatError> {
    if dims.is_empty() {
        return Err(FormatError::ZeroRank);
    }
    if dims.len() > usize::from(u8::MAX) {
        return Err(FormatError::TooManyDims(dims.len()));
    }
    let mut volume: usize = 1;
    for (axis, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(FormatError::ZeroDim { axis });
        }
        volume = volume.checked_mul(d).ok_or(FormatError::TooManyDims(dims.len()))?;
    }
    Ok(volume)
}
