//! Binary checkpoint container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FCDD" | version: u32 | count: u32
//! repeated count times:
//!   name_len: u32 | name: UTF-8 bytes | rank: u32 | extents: u64 × rank
//!   dtype: u8 (0 = f32, 1 = f64) | values: raw little-endian
//! ```

use std::path::Path;

use super::element::{DType, Element};
use super::tensor::Tensor;
use crate::error::{load_err, FcddError, Result};

pub const MAGIC: &[u8; 4] = b"FCDD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type (exact when the dtype matches).
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), AnyTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(AnyTensor::to_tensor)
            .ok_or_else(|| load_err!("checkpoint lacks tensor '{name}'"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.dtype().tag());
            match t {
                AnyTensor::F32(t) => out.extend(f32::to_le_bytes_vec(t.data())),
                AnyTensor::F64(t) => out.extend(f64::to_le_bytes_vec(t.data())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(load_err!("not an FCDD checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(load_err!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| load_err!("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(load_err!("tensor '{name}' has implausible rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64()?).map_err(|_| load_err!("extent overflow"))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| load_err!("tensor '{name}' is too large"))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| load_err!("tensor '{name}' has unknown dtype tag {tag}"))?;
            let err = |e: FcddError| load_err!("tensor '{name}': {e}");
            let t = match dtype {
                DType::F32 => AnyTensor::F32(
                    Tensor::new(shape, f32::from_le_bytes_slice(r.take(n * 4)?)).map_err(err)?,
                ),
                DType::F64 => AnyTensor::F64(
                    Tensor::new(shape, f64::from_le_bytes_slice(r.take(n * 8)?)).map_err(err)?,
                ),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(load_err!("trailing bytes after the last tensor"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FcddError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FcddError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            FcddError::Load(m) => load_err!("{}: {m}", path.display()),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| load_err!("checkpoint truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        let mut expected = b"FCDD".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.push(0);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn corrupt_inputs_are_load_errors() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(FcddError::Load(_))));
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::<f64>::full(&[3, 3], 0.5));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_values(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) % 1000) as f64 / 7.0 - 50.0).collect();
            let mut ck = Checkpoint::new();
            if wide {
                ck.insert("t", &Tensor::new(shape.clone(), vals).unwrap());
            } else {
                ck.insert("t", &Tensor::new(shape.clone(), vals.iter().map(|&v| v as f32).collect()).unwrap());
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
