//! `SEMF` feature files: magic, u16 version, u32 frame count, u32 dim, then
//! row-major little-endian f32 frames.

use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SEMF";
pub const FEATURE_VERSION: u16 = 1;

/// A `T x d` matrix of frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::validation("n_frames", "a feature sequence needs at least one frame"));
        }
        if dim == 0 {
            return Err(Error::validation("dim", "feature dimension must be positive"));
        }
        if data.len() != n_frames * dim {
            return Err(Error::DimMismatch { expected: n_frames * dim, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at index {i}")));
        }
        Ok(FeatureSequence { n_frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        binio::put_f32s(&mut out, self.data.iter().copied());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        r.version(FEATURE_VERSION)?;
        let t_at = r.offset();
        let t = r.u32("frame count")? as usize;
        let d = r.u32("dimension")? as usize;
        if t == 0 {
            return Err(Error::parse(t_at, "zero frames"));
        }
        if d == 0 {
            return Err(Error::parse(t_at + 4, "zero dimension"));
        }
        let n = t
            .checked_mul(d)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b == r.remaining()))
            .ok_or_else(|| {
                Error::parse(
                    r.offset(),
                    format!("payload of {} bytes does not match shape {t}x{d}", r.remaining()),
                )
            })?;
        let data = r.f32s(n, "frames")?;
        r.finish()?;
        Ok(FeatureSequence { n_frames: t, dim: d, data })
    }
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::from_bytes(&binio::read_file(path)?)
}

pub fn write_features(path: &Path, fs: &FeatureSequence) -> Result<()> {
    binio::write_file(path, &fs.to_bytes())
}
