use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::regulate::frame_counts;
use crate::error::{Error, Result};
use crate::prompt::Gender;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Singing,
    Speech,
}

impl FromStr for CorpusKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singing" => Ok(CorpusKind::Singing),
            "speech" => Ok(CorpusKind::Speech),
            _ => Err(Error::config(format!("corpus kind must be singing or speech, got '{s}'"))),
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Singing => "singing",
            CorpusKind::Speech => "speech",
        })
    }
}

/// One manifest row. Speech and singing rows share this schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// WAV path, relative to the manifest directory unless absolute.
    pub audio: PathBuf,
    pub phonemes: Vec<String>,
    /// Per-phoneme durations in seconds.
    pub durations: Vec<f64>,
    /// F0 sidecar path: one value in Hz per frame, 0 for unvoiced.
    pub f0: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CorpusKind>,
    pub sample_rate: u32,
}

impl UtteranceRecord {
    pub fn kind(&self) -> CorpusKind {
        self.kind.unwrap_or(CorpusKind::Singing)
    }

    pub fn duration_secs(&self) -> f64 {
        self.durations.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestConfig {
    pub sample_rate: u32,
    pub hop: usize,
    /// Allowed disagreement between annotated and audio length, in frames.
    pub tolerance_frames: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            hop: 480,
            tolerance_frames: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestReport {
    pub records: Vec<UtteranceRecord>,
    pub rejected: Vec<Rejection>,
}

pub fn read_f0_sidecar(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::data(format!("{} line {}: bad f0 value '{l}'", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_f0_sidecar(path: &Path, f0: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(f0.len() * 8);
    for v in f0 {
        text.push_str(&format!("{v}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn validate_row(row: &mut UtteranceRecord, base: &Path, cfg: &IngestConfig) -> std::result::Result<(), String> {
    if row.phonemes.len() != row.durations.len() {
        return Err(format!(
            "{} phonemes but {} durations",
            row.phonemes.len(),
            row.durations.len()
        ));
    }
    if row.sample_rate != cfg.sample_rate {
        return Err(format!("sample rate {} differs from expected {}", row.sample_rate, cfg.sample_rate));
    }
    row.audio = resolve(base, &row.audio);
    row.f0 = resolve(base, &row.f0);

    let reader = hound::WavReader::open(&row.audio)
        .map_err(|e| format!("audio {}: {e}", row.audio.display()))?;
    let spec = reader.spec();
    if spec.sample_rate != cfg.sample_rate {
        return Err(format!(
            "audio {} is {} Hz, expected {}",
            row.audio.display(),
            spec.sample_rate,
            cfg.sample_rate
        ));
    }
    let audio_frames = (reader.duration() as usize).div_ceil(cfg.hop);

    let frame_rate = cfg.sample_rate as f64 / cfg.hop as f64;
    let annotated: usize = frame_counts(&row.durations, frame_rate)
        .map_err(|e| e.to_string())?
        .iter()
        .sum();
    if annotated.abs_diff(audio_frames) > cfg.tolerance_frames {
        return Err(format!(
            "phoneme durations cover {annotated} frames but audio has {audio_frames}"
        ));
    }

    if !row.f0.exists() {
        return Err(format!("missing f0 sidecar {}", row.f0.display()));
    }
    let f0 = read_f0_sidecar(&row.f0).map_err(|e| e.to_string())?;
    if f0.len().abs_diff(audio_frames) > cfg.tolerance_frames {
        return Err(format!("f0 has {} frames but audio has {audio_frames}", f0.len()));
    }
    if f0.iter().all(|&v| v <= 0.0) {
        return Err("f0 has no voiced frames".into());
    }
    Ok(())
}

/// Reads a JSON-lines manifest and validates every row. Invalid rows are
/// reported in [`IngestReport::rejected`]; an unreadable manifest is an error.
/// Rows without a `kind` take `default_kind`.
pub fn ingest_corpus(manifest: &Path, default_kind: CorpusKind, cfg: &IngestConfig) -> Result<IngestReport> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut report = IngestReport::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row: UtteranceRecord = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("{} line {}: {e}", manifest.display(), lineno + 1))
        })?;
        row.kind.get_or_insert(default_kind);
        match validate_row(&mut row, base, cfg) {
            Ok(()) => report.records.push(row),
            Err(reason) => {
                tracing::warn!(id = %row.id, %reason, "rejected manifest row");
                report.rejected.push(Rejection { id: row.id, reason });
            }
        }
    }
    Ok(report)
}
