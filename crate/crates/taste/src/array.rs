//! Binary array files: magic, version byte, rank byte, `u32` little-endian
//! dimensions, then little-endian `f32` values in row-major order.

use std::path::Path;

use taste_core::Matrix;

use crate::error::{AppError, AppResult};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"TARR";
pub const VERSION: u8 = 1;

/// A decoded array of any rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_ints(values: &[usize]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> AppResult<Matrix> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => return Err(AppError::Data(format!("expected a rank-1 or rank-2 array, got shape {s:?}"))),
        };
        Ok(Matrix::from_vec(r, c, self.data.iter().map(|&x| x as f64).collect())?)
    }

    pub fn to_ints(&self) -> AppResult<Vec<usize>> {
        self.data
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
                    Ok(x as usize)
                } else {
                    Err(AppError::Data(format!("array holds non-integer value {x}")))
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Decodes one array from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> AppResult<(Self, usize)> {
        let bad = |m: &str| AppError::Data(format!("malformed array: {m}"));
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(AppError::Data(format!(
                "array version {} is not supported (expected {VERSION})",
                bytes[4]
            )));
        }
        let rank = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated shape"))?;
            shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let payload = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { shape, data }, pos + 4 * n))
    }

    pub fn decode(bytes: &[u8]) -> AppResult<Self> {
        let (a, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(AppError::Data(format!("{} trailing bytes after array", bytes.len() - used)));
        }
        Ok(a)
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    }
}
