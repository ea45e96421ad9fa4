//! Range/melody decoupled pitch representation.
//!
//! A frame-level F0 contour is split into a scalar vocal-range factor (the
//! mean of the voiced frames) and a melody contour whose voiced part is
//! rescaled multiplicatively to a fixed mean. Multiplying F0 by a constant is
//! a transposition, so the melody contour is invariant to the singer's range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean (Hz) that every melody contour is rescaled to.
pub const MELODY_MEAN_HZ: f64 = 230.0;

/// Frame-level F0 in Hz. A value of exactly 0 marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Sequence(pub Vec<f64>);

impl F0Sequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::invalid(format!("f0 frame {i} is {v}; values must be finite and >= 0")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn voiced_mask(&self) -> Vec<bool> {
        self.0.iter().map(|&v| v > 0.0).collect()
    }

    pub fn voiced_count(&self) -> usize {
        self.0.iter().filter(|&&v| v > 0.0).count()
    }

    /// Multiplies every voiced frame by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|&v| v * factor).collect())
    }
}

/// Vocal-range factor plus range-invariant melody, both rounded to whole Hz.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoupledPitch {
    pub range_factor: u32,
    /// Melody contour; 0 on unvoiced frames.
    pub melody: Vec<u32>,
}

/// Arithmetic mean over the voiced (> 0) frames.
pub fn voiced_mean(f0: &F0Sequence) -> Result<f64> {
    let (sum, count) = f0
        .0
        .iter()
        .filter(|&&v| v > 0.0)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if count == 0 {
        return Err(Error::invalid("f0 sequence has no voiced frames"));
    }
    Ok(sum / count as f64)
}

/// Round half away from zero into whole Hz.
fn round_hz(v: f64) -> u32 {
    v.round() as u32
}

/// Splits `f0` into a range factor and a melody rescaled to `target_mean`.
pub fn decompose_f0(f0: &F0Sequence, target_mean: f64) -> Result<DecoupledPitch> {
    if !(target_mean > 0.0) {
        return Err(Error::invalid(format!("target mean must be positive, got {target_mean}")));
    }
    let mean = voiced_mean(f0)?;
    let scale = target_mean / mean;
    let melody = f0
        .0
        .iter()
        .map(|&v| if v > 0.0 { round_hz(v * scale).max(1) } else { 0 })
        .collect();
    Ok(DecoupledPitch {
        range_factor: round_hz(mean),
        melody,
    })
}

/// Inverse of [`decompose_f0`] up to rounding: voiced frames become
/// `melody * range_factor / target_mean`.
pub fn recompose_f0(pitch: &DecoupledPitch, target_mean: f64) -> Result<F0Sequence> {
    if pitch.range_factor == 0 {
        return Err(Error::invalid("range factor must be positive"));
    }
    let scale = pitch.range_factor as f64 / target_mean;
    Ok(F0Sequence(
        pitch
            .melody
            .iter()
            .map(|&m| if m > 0 { m as f64 * scale } else { 0.0 })
            .collect(),
    ))
}

/// Rounds a raw contour into whole-Hz tokens without rescaling. This is the
/// melody input used when decoupling is disabled.
pub fn raw_pitch_tokens(f0: &F0Sequence) -> Vec<u32> {
    f0.0.iter()
        .map(|&v| if v > 0.0 { round_hz(v).max(1) } else { 0 })
        .collect()
}
