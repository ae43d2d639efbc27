//! Flat little-endian binary container for named `f64` arrays.
//!
//! Layout: magic `CILB1`, `u32` config count, that many `u32` config
//! values, `u32` array count, then per array `u32` name length, UTF-8 name,
//! `u32` rank, `rank` × `u32` extents, and the row-major `f64` payload.

use std::path::Path;

use crate::error::{CilError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"CILB1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub config: Vec<u32>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(config: Vec<u32>) -> Self {
        Self {
            config,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CilError::Format {
                offset: 0,
                field: name.to_string(),
                message: "array missing".into(),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for v in &self.config {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend(t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(r.fail(0, "magic", format!("expected CILB1, found {:?}", String::from_utf8_lossy(magic))));
        }
        let n_config = r.u32("config count")? as usize;
        let config = (0..n_config)
            .map(|i| r.u32(&format!("config[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let n_arrays = r.u32("array count")? as usize;
        let mut arrays: Vec<(String, Tensor)> = Vec::new();
        for a in 0..n_arrays {
            let at = r.pos;
            let len = r.u32(&format!("array[{a}].name_len"))? as usize;
            let raw = r.take(len, &format!("array[{a}].name"))?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| r.fail(at + 4, &format!("array[{a}].name"), "name is not UTF-8".into()))?
                .to_string();
            if arrays.iter().any(|(n, _)| *n == name) {
                return Err(r.fail(at, &name, "duplicate array name".into()));
            }
            let rank = r.u32(&format!("{name}.rank"))? as usize;
            let shape = (0..rank)
                .map(|i| r.u32(&format!("{name}.extent[{i}]")).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.fail(r.pos, &format!("{name}.extent"), format!("extents {shape:?} exceed the file")))?;
            let payload = r.take(count * 8, &format!("{name}.payload"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CilError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CilError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, field: &str, message: String) -> CilError {
        CilError::Format {
            offset,
            field: field.to_string(),
            message,
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s: &'a [u8] = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                field,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}
