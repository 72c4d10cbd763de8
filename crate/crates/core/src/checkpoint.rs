//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"CCSM"`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` ndim, `u32` dims,
//! `f64` values; finally a `u64`-length-prefixed JSON metadata block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CCSM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// Optimizer steps taken.
    pub step: u64,
    /// Epoch this snapshot was taken after.
    pub epoch: usize,
    pub val_dice: f64,
    /// Stream the next epoch's shuffle would draw from.
    pub rng: Rng,
}

/// Named tensors (model parameters, then `adam.m.*`/`adam.v.*` moments)
/// plus metadata.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Bitwise equality of tensors and metadata.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
            && serde_json::to_string(&self.meta).ok() == serde_json::to_string(&other.meta).ok()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let at = r.pos;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or(Error::Format {
                    offset: at,
                    msg: "tensor too large".into(),
                })?;
            let raw = r.take(n * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let len = r.u64("metadata length")?;
        let at = r.pos;
        let len = usize::try_from(len).map_err(|_| Error::Format {
            offset: at,
            msg: "metadata too large".into(),
        })?;
        let meta = serde_json::from_slice(r.take(len, "metadata")?).map_err(|e| Error::Format {
            offset: at,
            msg: format!("metadata: {e}"),
        })?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(ModelCheckpoint { tensors, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let mut rng = Rng::new(1);
        ModelCheckpoint {
            tensors: vec![
                ("a".into(), Tensor::randn(&[2, 3], 1.0, &mut rng)),
                ("b.c".into(), Tensor::scalar(f64::MIN_POSITIVE)),
                ("empty".into(), Tensor::zeros(&[0, 4])),
            ],
            meta: CheckpointMeta {
                config: TrainConfig::default(),
                step: 7,
                epoch: 2,
                val_dice: 0.123456789012345,
                rng,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert!(c.bit_eq(&back));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CCSM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(
                    ModelCheckpoint::from_bytes(&bytes[..cut]),
                    Err(Error::Format { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 9, expected: VERSION })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
