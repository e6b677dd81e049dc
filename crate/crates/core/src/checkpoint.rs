//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        b"TGAN"
//! version      u32
//! digest       [u8; 32]      sha256 of the generator/discriminator specs
//! status       u8            0 in progress, 1 complete, 2 diverged
//! epoch        u32           completed epochs
//! step         u64           completed steps
//! tensors      u32 count, then entries
//! optimizers   u32 count, then per optimizer:
//!                lr, beta1, beta2, eps: f64; t: u64;
//!                u32 count, then `count` first-moment entries and
//!                `count` second-moment entries
//! rng          seed [u8; 32], stream u64, word_pos u128
//!
//! entry        name_len u32, name bytes, rank u32, dims u32[rank], f32 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::losslog::write_atomic;
use crate::noise::RngState;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TGAN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointStatus {
    InProgress,
    Complete,
    Diverged,
}

impl CheckpointStatus {
    fn code(self) -> u8 {
        match self {
            CheckpointStatus::InProgress => 0,
            CheckpointStatus::Complete => 1,
            CheckpointStatus::Diverged => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::InProgress),
            1 => Ok(Self::Complete),
            2 => Ok(Self::Diverged),
            _ => Err(Error::CheckpointTruncated(format!(
                "unknown status byte {c}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub status: CheckpointStatus,
    pub epoch: u32,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizers: Vec<AdamState<f32>>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn verify_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.digest != expected {
            return Err(Error::CheckpointDigest {
                found: hex::encode(self.digest),
                expected: hex::encode(expected),
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.digest);
        w.push(self.status.code());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut w, self.tensors.len());
        for (name, t) in &self.tensors {
            put_entry(&mut w, name, t);
        }
        put_u32(&mut w, self.optimizers.len());
        for opt in &self.optimizers {
            let AdamConfig {
                lr,
                beta1,
                beta2,
                eps,
            } = opt.config;
            for v in [lr, beta1, beta2, eps] {
                w.extend_from_slice(&v.to_le_bytes());
            }
            w.extend_from_slice(&opt.t.to_le_bytes());
            put_u32(&mut w, opt.m.len());
            for (i, t) in opt.m.iter().enumerate() {
                put_entry(&mut w, &format!("m.{i}"), t);
            }
            for (i, t) in opt.v.iter().enumerate() {
                put_entry(&mut w, &format!("v.{i}"), t);
            }
        }
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(Error::CheckpointMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let digest = r.array()?;
        let status = CheckpointStatus::from_code(r.array::<1>()?[0])?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            tensors.push(r.entry()?);
        }
        let n_opt = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n_opt.min(16));
        for _ in 0..n_opt {
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let t = r.u64()?;
            let k = r.u32()? as usize;
            let m = (0..k)
                .map(|_| r.entry().map(|e| e.1))
                .collect::<Result<Vec<_>>>()?;
            let v = (0..k)
                .map(|_| r.entry().map(|e| e.1))
                .collect::<Result<Vec<_>>>()?;
            optimizers.push(AdamState { config, t, m, v });
        }
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        if r.pos != bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            digest,
            status,
            epoch,
            step,
            tensors,
            optimizers,
            rng,
        })
    }
}

fn put_u32(w: &mut Vec<u8>, v: usize) {
    w.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_entry(w: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(w, name.len());
    w.extend_from_slice(name.as_bytes());
    put_u32(w, t.rank());
    for &d in t.shape() {
        put_u32(w, d);
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::CheckpointTruncated(format!(
                    "needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn entry(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointTruncated("tensor name is not utf-8".into()))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::CheckpointTensor(name.clone()))?;
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::CheckpointTensor(name.clone()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|_| Error::CheckpointTensor(name.clone()))?;
        Ok((name, t))
    }
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
