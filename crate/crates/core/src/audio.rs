//! Waveform container, RMS and WAV file I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Reads a mono 16-bit or float WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::data(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: std::result::Result<Vec<f32>, _> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect(),
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect()
            }
        };
        let samples = samples.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(Self::new(samples, spec.sample_rate))
    }

    /// Writes a mono 32-bit float WAV file.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let to_err = |e: hound::Error| Error::data(format!("{}: {e}", path.display()));
        let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(to_err)?;
        }
        writer.finalize().map_err(to_err)
    }
}

/// Root-mean-square amplitude; 0 for an empty slice.
pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&x| (x as f64) * (x as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 1.0], 24000);
        w.write_wav(&path).unwrap();
        assert_eq!(Waveform::read_wav(&path).unwrap(), w);
    }

    #[test]
    fn rms_of_constant() {
        assert_eq!(rms(&[0.5; 10]), 0.5);
        assert_eq!(rms(&[]), 0.0);
    }
}
