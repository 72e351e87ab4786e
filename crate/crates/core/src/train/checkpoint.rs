//! Checkpoint file.
//!
//! All integers little-endian.
//!
//! ```text
//! magic          4 bytes  "CYC1"
//! version        u32
//! config         u64 length + UTF-8 bytes
//! geometry       3 × u64  channels, samples, classes
//! epoch          u64
//! val_accuracy   f64
//! count          u32
//! per tensor     u32 name length, name bytes, u32 rank, rank × u64 extents,
//!                f64 values
//! checksum       u64      wrapping sum of every byte after the magic
//! ```

use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{Geometry, Model};
use crate::numcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CYC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Serialized run configuration the model was built from.
    pub config: String,
    pub geometry: Geometry,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of `model` with an empty configuration text.
    pub fn from_model(model: &Model, epoch: usize, val_accuracy: f64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: String::new(),
            geometry: model.config.geometry,
            epoch,
            val_accuracy,
            tensors: model.store.snapshot(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        let geo = self.geometry;
        for v in [geo.channels, geo.samples, geo.classes, self.epoch] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.val_accuracy.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = byte_sum(&out[4..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len(), "truncated checkpoint"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected CYC1"));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = byte_sum(&bytes[4..body_end]);
        if stored != computed {
            return Err(Error::format(
                body_end,
                format!("checksum mismatch: stored {stored:#x}, computed {computed:#x}"),
            ));
        }
        let mut r = Reader::new(&bytes[..body_end]);
        r.take(4)?;
        let format_version = r.u32()?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {format_version}"),
            ));
        }
        let config_len = r.u64()? as usize;
        let config_at = r.pos;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::format(config_at, "config snapshot is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let [channels, samples, classes, epoch] = dims;
        let val_accuracy = r.f64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::format(at, format!("tensor {name} has invalid shape {shape:?}"))
                })?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format(at, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body_end {
            return Err(Error::format(r.pos, "unexpected bytes before checksum"));
        }
        Ok(Self {
            format_version,
            config,
            geometry: Geometry {
                channels,
                samples,
                classes,
            },
            epoch,
            val_accuracy,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: "seed = 3\nvariant = mhsp_iue\n".into(),
            geometry: Geometry {
                channels: 22,
                samples: 750,
                classes: 4,
            },
            epoch: 7,
            val_accuracy: 0.8125,
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(
                        &[2, 3],
                        vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, 0.1],
                    )
                    .unwrap(),
                ),
                ("b.scalar".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
        }
    }

    fn bits(c: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        c.tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.config, c.config);
        assert_eq!(back.geometry, c.geometry);
        assert_eq!(back.epoch, 7);
        assert_eq!(back.val_accuracy.to_bits(), c.val_accuracy.to_bits());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn every_single_byte_corruption_is_caught() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i}");
        }
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
