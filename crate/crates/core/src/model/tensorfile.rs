//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "SIF1"
//! count    u32
//! entries  count times:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   dtype    u8      0 = f32
//!   ndim     u8
//!   dims     ndim x u32
//!   payload  prod(dims) x f32, row-major
//! ```
//!
//! Values live on disk as f32 and are widened to f64 when converted to
//! matrices. Decoding reports the byte offset of the first problem.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

pub const MAGIC: &[u8; 4] = b"SIF1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u32>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Domain(format!("{} dimensions exceed 255", dims.len())));
        }
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        if expected != Some(data.len()) {
            return Err(Error::Domain(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { dims, data })
    }

    fn narrow(values: &[f64]) -> Result<Vec<f32>> {
        let out: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("value outside the f32 range".into()));
        }
        Ok(out)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Tensor::new(
            vec![m.rows() as u32, m.cols() as u32],
            Tensor::narrow(m.as_slice())?,
        )
    }

    pub fn from_vector(v: &Vector) -> Result<Self> {
        Tensor::new(vec![v.len() as u32], Tensor::narrow(v)?)
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(Error::Domain(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        }
        Matrix::new(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_vector(&self) -> Result<Vector> {
        if self.dims.len() != 1 {
            return Err(Error::Domain(format!(
                "expected a 1-D tensor, got dims {:?}",
                self.dims
            )));
        }
        Vector::new(self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Domain(format!("duplicate tensor name `{name}`")));
        }
        if u32::try_from(name.len()).is_err() {
            return Err(Error::Domain("tensor name too long".into()));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let count = r.u32("entry count")?;
        let mut names = HashSet::new();
        let mut entries = Vec::new();
        for index in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_at = r.pos;
            let raw = r.take(name_len, "name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| r.error_at(name_at, format!("entry {index}: name is not UTF-8")))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(r.error_at(name_at, format!("duplicate tensor name `{name}`")));
            }
            let dtype_at = r.pos;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(r.error_at(dtype_at, format!("unsupported dtype {dtype}")));
            }
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dimension")?);
            }
            let payload_at = r.pos;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| r.error_at(payload_at, "payload size overflows"))?;
            let payload = r.take(n * 4, "payload")?;
            let mut data = Vec::with_capacity(n);
            for (k, chunk) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                if !v.is_finite() {
                    return Err(r.error_at(payload_at + 4 * k, format!("non-finite value in `{name}`")));
                }
                data.push(v);
            }
            entries.push((name, Tensor { dims, data }));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(TensorFile { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TensorFile::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn matrix_round_trip_is_f32_exact() {
        let m = Matrix::from_rows(&[[0.1, -2.5], [1e-3, 3.0], [7.25, 1.0 / 3.0]]).unwrap();
        let mut f = TensorFile::default();
        f.push("m", Tensor::from_matrix(&m).unwrap()).unwrap();
        let back = TensorFile::decode(&f.encode()).unwrap();
        let got = back.get("m").unwrap().to_matrix().unwrap();
        for (a, b) in m.as_slice().iter().zip(got.as_slice()) {
            assert_eq!((*a as f32) as f64, *b);
        }
    }

    #[test]
    fn bad_magic_rejected_at_zero() {
        let mut bytes = TensorFile::default().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(offset_of(TensorFile::decode(&bytes).unwrap_err()), 0);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.push(0);
        bytes.push(2);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        let payload_at = bytes.len() as u64;
        bytes.extend_from_slice(&[0u8; 12]);
        let err = TensorFile::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
        assert_eq!(offset_of(err), payload_at);
    }

    #[test]
    fn dtype_and_duplicates_rejected() {
        let mut f = TensorFile::default();
        f.push("a", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut bytes = f.encode();
        // magic(4) count(4) name_len(4) name(1) -> dtype at 13
        bytes[13] = 1;
        assert_eq!(offset_of(TensorFile::decode(&bytes).unwrap_err()), 13);

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.push(b'a');
            bytes.extend_from_slice(&[0, 0]);
            bytes.extend_from_slice(&1.5f32.to_le_bytes());
        }
        // second name starts after 8 + (4 + 1 + 2 + 4) + 4 bytes
        assert_eq!(offset_of(TensorFile::decode(&bytes).unwrap_err()), 23);
        assert!(f.push("a", Tensor::new(vec![], vec![2.0]).unwrap()).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = TensorFile::default().encode();
        bytes.push(0);
        assert_eq!(offset_of(TensorFile::decode(&bytes).unwrap_err()), 8);
    }

    #[test]
    fn out_of_range_values_refused_on_write() {
        let m = Matrix::from_rows(&[[1e300]]).unwrap();
        assert!(Tensor::from_matrix(&m).is_err());
    }
}
