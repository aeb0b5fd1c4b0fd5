//! `CRFC` tensor checkpoints.
//!
//! Layout, all little-endian: magic `b"CRFC"`, version `u32`, then records
//! until end of file, each `name_len u32`, name bytes (UTF-8), `rank u32`,
//! `dims u32[rank]`, `f64[prod(dims)]`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::ByteReader;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Tensor {
            name: name.into(),
            dims,
            data,
        };
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::DimensionMismatch {
                expected: t.dims.iter().product(),
                actual: t.data.len(),
            });
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Corrupt(format!("{v} does not fit in u32")));
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&to_u32(t.name.len())?.to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&to_u32(t.dims.len())?.to_le_bytes());
            for &d in &t.dims {
                buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.magic()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let mut tensors = Vec::new();
        let mut seen = BTreeSet::new();
        while r.remaining() > 0 {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Corrupt(format!("duplicate tensor {name:?}")));
            }
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("tensor {name:?} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} size overflows")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("tensor {name:?} holds non-finite values")));
            }
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                Tensor::new("a.weight", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -0.0]).unwrap(),
                Tensor::new("a.bias", vec![2], vec![0.5, f64::MIN_POSITIVE]).unwrap(),
            ],
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensors[0].data[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 6, 9, bytes.len() - 1] {
            let e = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, Error::BadMagic { .. }) || e.is_io(), "{cut}: {e:?}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }
}
