//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DUPN"  u32 version  u32 entry_count
//! per entry:  u32 name_len, name (UTF-8), u32 rank, u64 extents[rank], f64 values[..]
//! per entry (same order):  f64 accumulators[..]
//! u64 config fingerprint
//! u64 step  u32 increments
//! ```

use std::fs;
use std::path::Path;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DUPN";
pub const FORMAT_VERSION: u32 = 1;

/// Training progress carried alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Optimiser steps taken so far; seeds the dropout stream on resume.
    pub step: u64,
    /// Number of incremental updates applied on top of the base run.
    pub increments: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: Tensor,
    pub accum: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    pub fingerprint: u64,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(store: &ParameterStore, fingerprint: u64, meta: CheckpointMeta) -> Self {
        let entries = store
            .entries()
            .iter()
            .map(|e| CheckpointEntry {
                name: e.name.clone(),
                value: e.value.clone(),
                accum: e.accum.clone(),
            })
            .collect();
        Checkpoint {
            entries,
            fingerprint,
            meta,
        }
    }

    /// Copies values and accumulators into a store with the same layout.
    pub fn restore_into(&self, store: &mut ParameterStore) -> Result<()> {
        if store.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (id, ce) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.entries) {
            let (name, shape) = (store.name(id), store.value(id).shape());
            if name != ce.name || shape != ce.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {name} {shape:?}",
                    ce.name,
                    ce.value.shape()
                )));
            }
        }
        for (id, ce) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.entries) {
            *store.value_mut(id) = ce.value.clone();
            *store.accum_mut(id) = ce.accum.clone();
        }
        store.zero_grads();
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.fingerprint == expected {
            Ok(())
        } else {
            Err(Error::Fingerprint {
                expected,
                found: self.fingerprint,
            })
        }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in e.accum.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.meta.step.to_le_bytes());
        out.extend_from_slice(&self.meta.increments.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut heads = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let value = r.f64s(len)?;
            heads.push((name, shape, value));
        }
        let mut entries = Vec::with_capacity(heads.len());
        for (name, shape, value) in heads {
            let accum = r.f64s(value.len())?;
            let ctx = |e: Error| Error::Checkpoint(format!("tensor {name}: {e}"));
            entries.push(CheckpointEntry {
                value: Tensor::new(shape.clone(), value).map_err(ctx)?,
                accum: Tensor::new(shape, accum).map_err(ctx)?,
                name,
            });
        }
        let fingerprint = r.u64()?;
        let meta = CheckpointMeta {
            step: r.u64()?,
            increments: r.u32()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            entries,
            fingerprint,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
