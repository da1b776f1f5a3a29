//! `RIMG` range-image files.
//!
//! Layout: magic `RIMG`, then version, height, width and channel count as
//! little-endian `u32`; `C` planes of `H·W` little-endian `f32`; the mask
//! plane as bytes; two presence bytes (labels, weights); then the label plane
//! (bytes) and weight plane (`f32`) when present. Channels are stored raw,
//! before normalization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, Reader};
use crate::projection::{normalize_into, ChannelStats, RangeImage, BACKGROUND};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RIMG";
pub const VERSION: u32 = 1;
const KIND: &str = "range image";

#[derive(Clone, Debug, PartialEq)]
pub struct RangeSample {
    pub height: usize,
    pub width: usize,
    /// Channel planes; index 0 is depth, index 1 elevation.
    pub channels: Vec<Vec<f32>>,
    pub mask: Vec<u8>,
    pub labels: Option<Vec<u8>>,
    pub weights: Option<Vec<f32>>,
}

impl RangeSample {
    pub fn from_range_image(image: &RangeImage, weights: Option<Vec<f32>>) -> Result<Self> {
        let s = Self {
            height: image.height,
            width: image.width,
            channels: vec![image.depth.clone(), image.elevation.clone()],
            mask: image.mask.clone(),
            labels: image.labels.clone(),
            weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Enforces the range-image invariants: empty pixels carry zeros and
    /// background, valid pixels a positive finite depth and positive weight.
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        let bad = |detail: String| Err(Error::format(KIND, detail));
        if n == 0 {
            return bad(format!("empty extent {}x{}", self.height, self.width));
        }
        if self.channels.is_empty() {
            return bad("no channels".into());
        }
        if self.channels.iter().any(|c| c.len() != n)
            || self.mask.len() != n
            || self.labels.as_ref().is_some_and(|l| l.len() != n)
            || self.weights.as_ref().is_some_and(|w| w.len() != n)
        {
            return bad(format!("plane lengths do not match {}x{}", self.height, self.width));
        }
        for px in 0..n {
            let (row, col) = (px / self.width, px % self.width);
            let label = self.labels.as_ref().map(|l| l[px]);
            let weight = self.weights.as_ref().map(|w| w[px]);
            match self.mask[px] {
                0 => {
                    if self.channels.iter().any(|c| c[px].to_bits() != 0) {
                        return bad(format!("pixel ({row}, {col}) has mask 0 but nonzero data"));
                    }
                    if label.is_some_and(|l| l != BACKGROUND) {
                        return bad(format!("pixel ({row}, {col}) has mask 0 but a foreground label"));
                    }
                    if weight.is_some_and(|w| w.to_bits() != 0) {
                        return bad(format!("pixel ({row}, {col}) has mask 0 but a nonzero weight"));
                    }
                }
                1 => {
                    if self.channels.iter().any(|c| !c[px].is_finite()) || !(self.channels[0][px] > 0.0) {
                        return bad(format!("pixel ({row}, {col}) is valid but its depth is not positive and finite"));
                    }
                    if weight.is_some_and(|w| !(w.is_finite() && w > 0.0)) {
                        return bad(format!("pixel ({row}, {col}) is valid but its weight is not positive"));
                    }
                }
                m => return bad(format!("pixel ({row}, {col}) has mask value {m}")),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = self.pixels();
        let mut out = Vec::with_capacity(20 + n * (4 * self.channels.len() + 6) + 2);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height as u32, self.width as u32, self.channels.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.channels {
            c.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&self.mask);
        out.push(u8::from(self.labels.is_some()));
        out.push(u8::from(self.weights.is_some()));
        if let Some(l) = &self.labels {
            out.extend_from_slice(l);
        }
        if let Some(w) = &self.weights {
            w.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, KIND);
        if r.take(4)? != MAGIC {
            return Err(Error::format(KIND, "bad magic, expected `RIMG`"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                KIND,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let c = r.u32()? as usize;
        let n = height
            .checked_mul(width)
            .filter(|n| n.checked_mul(c.max(1)).and_then(|v| v.checked_mul(4)).is_some())
            .ok_or_else(|| Error::format(KIND, "declared extents overflow"))?;
        if c == 0 || c > 64 {
            return Err(Error::format(KIND, format!("channel count {c} out of range")));
        }
        let mut channels = Vec::with_capacity(c);
        for _ in 0..c {
            channels.push(r.f32s(n)?);
        }
        let mask = r.take(n)?.to_vec();
        let mut flags = [false; 2];
        for f in &mut flags {
            *f = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::format(KIND, format!("presence flag {v} is not 0 or 1"))),
            };
        }
        let labels = if flags[0] { Some(r.take(n)?.to_vec()) } else { None };
        let weights = if flags[1] { Some(r.f32s(n)?) } else { None };
        r.finish()?;
        let s = Self {
            height,
            width,
            channels,
            mask,
            labels,
            weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| e.in_file(path))
    }

    /// Standardized depth/elevation planes as a `[2, H, W]` tensor.
    pub fn normalized<T: Scalar>(&self, stats: &ChannelStats) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); 2 * self.pixels()];
        self.normalize_into(stats, &mut out)?;
        Tensor::from_vec(&[2, self.height, self.width], out)
    }

    pub fn normalize_into<T: Scalar>(&self, stats: &ChannelStats, out: &mut [T]) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "expected depth and elevation channels, found {}",
                self.channels.len()
            )));
        }
        normalize_into(&self.channels[0], &self.channels[1], &self.mask, stats, out)
    }
}
