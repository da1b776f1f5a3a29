//! `RIUW` checkpoint files.
//!
//! Layout (all integers little-endian `u32`): magic `RIUW`, version, entry
//! count, then per entry the name length and UTF-8 name bytes, the rank, the
//! extents, and the `f32` data. Integer metadata (configuration, counters)
//! is stored as `f32` words carrying the raw integer bits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"RIUW";
pub const VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, value: u64) {
        let words = vec![
            f32::from_bits(value as u32),
            f32::from_bits((value >> 32) as u32),
        ];
        self.push(name, &[2], words);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing entry `{name}`")))?;
        match e.data[..] {
            [lo, hi] => Ok(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32),
            _ => Err(Error::format(KIND, format!("entry `{name}` is not a counter"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, KIND);
        if r.take(4)? != MAGIC {
            return Err(Error::format(KIND, "bad magic, expected `RIUW`"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                KIND,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(KIND, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(KIND, format!("entry `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(KIND, format!("entry `{name}` is too large")))?;
                shape.push(d);
            }
            let data = r.f32s(numel)?;
            if entries.iter().any(|e: &Entry| e.name == name) {
                return Err(Error::format(KIND, format!("duplicate entry `{name}`")));
            }
            entries.push(Entry { name, shape, data });
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
