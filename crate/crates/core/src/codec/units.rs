//! Acoustic unit grids and their on-disk format.
//!
//! File layout: 16-byte header (`SVU1`, T, n_q, K as little-endian u32)
//! followed by T·n_q little-endian u16 indices in frame-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_MAGIC: [u8; 4] = *b"SVU1";
const HEADER_LEN: usize = 16;

/// T × n_q grid of codebook indices, each below `codebook_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcousticUnitSequence {
    n_q: usize,
    codebook_size: usize,
    frames: Vec<Vec<u32>>,
}

impl AcousticUnitSequence {
    pub fn new(n_q: usize, codebook_size: usize, frames: Vec<Vec<u32>>) -> Result<Self> {
        if n_q == 0 {
            return Err(Error::invalid("n_q must be positive"));
        }
        if codebook_size < 1 || codebook_size > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!("codebook size {codebook_size} out of range")));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.len() != n_q {
                return Err(Error::invalid(format!("frame {t} has {} codes, expected {n_q}", f.len())));
            }
            if let Some(c) = f.iter().position(|&i| i as usize >= codebook_size) {
                return Err(Error::invalid(format!(
                    "frame {t} codebook {c}: index {} >= {codebook_size}",
                    f[c]
                )));
            }
        }
        Ok(Self {
            n_q,
            codebook_size,
            frames,
        })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Vec<u32>] {
        &self.frames
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.n_q * self.len());
        out.extend_from_slice(&UNIT_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_q as u32).to_le_bytes());
        out.extend_from_slice(&(self.codebook_size as u32).to_le_bytes());
        for &i in self.frames.iter().flatten() {
            out.extend_from_slice(&(i as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != UNIT_MAGIC {
            return Err(Error::data("not a unit file (bad magic or short header)"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (t, n_q, k) = (word(1), word(2), word(3));
        let body = &bytes[HEADER_LEN..];
        if n_q == 0 || body.len() != 2 * t * n_q {
            return Err(Error::data(format!(
                "unit file body is {} bytes, header says {t}x{n_q}",
                body.len()
            )));
        }
        let codes: Vec<u32> = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        let frames = codes.chunks(n_q).map(<[u32]>::to_vec).collect();
        Self::new(n_q, k, frames).map_err(|e| Error::data(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let u = AcousticUnitSequence::new(3, 64, vec![vec![0, 5, 63], vec![1, 2, 3]]).unwrap();
        let b = u.to_bytes();
        assert_eq!(b.len(), 16 + 12);
        assert_eq!(&b[..4], b"SVU1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[16..18], &0u16.to_le_bytes());
        assert_eq!(&b[20..22], &63u16.to_le_bytes());
        assert_eq!(AcousticUnitSequence::from_bytes(&b).unwrap(), u);
    }

    #[test]
    fn rejects_ragged_and_out_of_range() {
        assert!(AcousticUnitSequence::new(2, 4, vec![vec![0, 1], vec![2]]).is_err());
        assert!(AcousticUnitSequence::new(2, 4, vec![vec![0, 4]]).is_err());
        let mut b = AcousticUnitSequence::new(1, 4, vec![vec![1]]).unwrap().to_bytes();
        b.push(0);
        assert!(AcousticUnitSequence::from_bytes(&b).is_err());
    }
}
