//! FMAT: a minimal container for named dense matrices.
//!
//! ```text
//! "FMAT" | version u32 | section count u32
//! per section: name length u32 | name (UTF-8) | dtype u8 (0 = f32, 1 = f64)
//!              | rows u64 | cols u64 | row-major little-endian payload
//! ```

use std::io::{Read, Write};

use super::IoError;
use crate::features::FeatureMatrix;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub matrix: FeatureMatrix,
}

impl Section {
    pub fn f64(name: impl Into<String>, matrix: FeatureMatrix) -> Self {
        Self { name: name.into(), dtype: Dtype::F64, matrix }
    }
}

pub fn write_fmat<W: Write>(mut w: W, sections: &[Section]) -> Result<(), IoError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(sections.len()).map_err(|_| IoError::format("too many sections"))?.to_le_bytes())?;
    for s in sections {
        let name = s.name.as_bytes();
        w.write_all(&u32::try_from(name.len()).map_err(|_| IoError::format("section name too long"))?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[s.dtype as u8])?;
        w.write_all(&(s.matrix.rows() as u64).to_le_bytes())?;
        w.write_all(&(s.matrix.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(s.matrix.as_slice().len() * 8);
        for &x in s.matrix.as_slice() {
            match s.dtype {
                Dtype::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], IoError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_fmat<R: Read>(mut r: R) -> Result<Vec<Section>, IoError> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(IoError::format("not an FMAT file (bad magic)"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(IoError::format(format!("unsupported FMAT version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| IoError::format("section name is not UTF-8"))?;
        let dtype = match read_array::<1, _>(&mut r)?[0] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            d => return Err(IoError::format(format!("unknown dtype code {d} in section {name}"))),
        };
        let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| IoError::format(format!("section {name} is too large")))?;
        let width = if dtype == Dtype::F32 { 4 } else { 8 };
        let mut bytes = Vec::new();
        r.by_ref().take((n * width) as u64).read_to_end(&mut bytes)?;
        if bytes.len() != n * width {
            return Err(IoError::format(format!("section {name} is truncated")));
        }
        let data: Vec<f64> = match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        out.push(Section { name, dtype, matrix: FeatureMatrix::from_vec(rows, cols, data) });
    }
    Ok(out)
}
