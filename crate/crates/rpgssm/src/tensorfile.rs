//! A minimal binary tensor container for datasets and model parameters.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | field                          |
//! |------------|--------------------------------|
//! | 4          | magic `RPGT`                   |
//! | 2          | format version (currently 1)   |
//! | 1          | dtype: 0 = f64, 1 = f32        |
//! | 1          | reserved (zero)                |
//! | 4          | ndim (u32)                     |
//! | 8 × ndim   | dims (u64 each)                |
//! | …          | row-major payload              |
//!
//! The payload length is implied by the dims, so several tensors can be
//! concatenated in one stream and read back sequentially.

use nalgebra::DMatrix;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"RPGT";
const VERSION: u16 = 1;

/// An n-dimensional array with its on-disk element type.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64 { dims: Vec<u64>, data: Vec<f64> },
    F32 { dims: Vec<u64>, data: Vec<f32> },
}

fn element_count(dims: &[u64]) -> Result<usize> {
    let mut product: u64 = 1;
    for &d in dims {
        product = product
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidArgument("tensor dims overflow".into()))?;
    }
    usize::try_from(product)
        .map_err(|_| Error::InvalidArgument("tensor too large for this platform".into()))
}

impl Tensor {
    pub fn from_f64(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        if element_count(&dims)? != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {:?} imply {} elements, payload has {}",
                dims,
                element_count(&dims)?,
                data.len()
            )));
        }
        Ok(Tensor::F64 { dims, data })
    }

    pub fn from_f32(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if element_count(&dims)? != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {:?} imply {} elements, payload has {}",
                dims,
                element_count(&dims)?,
                data.len()
            )));
        }
        Ok(Tensor::F32 { dims, data })
    }

    pub fn dims(&self) -> &[u64] {
        match self {
            Tensor::F64 { dims, .. } | Tensor::F32 { dims, .. } => dims,
        }
    }

    /// Payload widened to f64 regardless of the stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Tensor::F64 { data, .. } => data.clone(),
            Tensor::F32 { data, .. } => data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let dims = self.dims();
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let dtype: u8 = match self {
            Tensor::F64 { .. } => 0,
            Tensor::F32 { .. } => 1,
        };
        w.write_all(&[dtype, 0])?;
        w.write_all(&u32::try_from(dims.len()).expect("ndim fits u32").to_le_bytes())?;
        for &d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match self {
            Tensor::F64 { data, .. } => {
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Tensor::F32 { data, .. } => {
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Read one tensor, leaving the stream positioned just past its payload.
    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let mut magic = [0_u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let mut halfword = [0_u8; 2];
        r.read_exact(&mut halfword)?;
        let version = u16::from_le_bytes(halfword);
        if version != VERSION {
            return Err(bad(format!("unsupported tensor format version {version}")));
        }
        let mut flags = [0_u8; 2];
        r.read_exact(&mut flags)?;
        let dtype = flags[0];
        let mut word = [0_u8; 4];
        r.read_exact(&mut word)?;
        let ndim = u32::from_le_bytes(word) as usize;
        if ndim > 64 {
            return Err(bad(format!("implausible tensor rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut doubleword = [0_u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut doubleword)?;
            dims.push(u64::from_le_bytes(doubleword));
        }
        let count = element_count(&dims).map_err(|e| bad(e.to_string()))?;
        match dtype {
            0 => {
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    r.read_exact(&mut doubleword)?;
                    data.push(f64::from_le_bytes(doubleword));
                }
                Ok(Tensor::F64 { dims, data })
            }
            1 => {
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    r.read_exact(&mut word)?;
                    data.push(f32::from_le_bytes(word));
                }
                Ok(Tensor::F32 { dims, data })
            }
            other => Err(bad(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Encode a matrix as a rank-2 tensor (dims `[rows, cols]`, row-major).
pub fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (rows, cols) = m.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(m[(r, c)]);
        }
    }
    Tensor::F64 { dims: vec![rows as u64, cols as u64], data }
}

pub fn tensor_to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let dims = t.dims();
    if dims.len() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "expected a rank-2 tensor, found rank {}",
            dims.len()
        )));
    }
    let (rows, cols) = (dims[0] as usize, dims[1] as usize);
    let data = t.to_f64_vec();
    Ok(DMatrix::from_fn(rows, cols, |r, c| data[r * cols + c]))
}

/// Encode equally shaped feature-by-time sequences as one rank-3 tensor
/// with dims `[sequences, time, features]`.
pub fn sequences_to_tensor(seqs: &[DMatrix<f64>]) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no sequences to encode".into()));
    }
    let (d, t_len) = seqs[0].shape();
    if seqs.iter().any(|s| s.shape() != (d, t_len)) {
        return Err(Error::DimensionMismatch("sequences differ in shape".into()));
    }
    let mut data = Vec::with_capacity(seqs.len() * t_len * d);
    for s in seqs {
        for t in 0..t_len {
            for r in 0..d {
                data.push(s[(r, t)]);
            }
        }
    }
    Ok(Tensor::F64 { dims: vec![seqs.len() as u64, t_len as u64, d as u64], data })
}

pub fn tensor_to_sequences(t: &Tensor) -> Result<Vec<DMatrix<f64>>> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "expected a rank-3 sequence tensor, found rank {}",
            dims.len()
        )));
    }
    let (n, t_len, d) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let data = t.to_f64_vec();
    Ok((0..n)
        .map(|i| DMatrix::from_fn(d, t_len, |r, c| data[(i * t_len + c) * d + r]))
        .collect())
}
