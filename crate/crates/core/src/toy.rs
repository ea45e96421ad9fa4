//! Synthetic singing corpus with controllable timbre, loudness and range.
//!
//! Two band-envelope timbres stand in for the two genders. Each melody is
//! rendered for every (gender, volume, range) combination, so the attributes
//! are independent of the melody. Rendering goes through the codec's own
//! harmonic-plus-noise synthesizer.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::analysis::{rms_to_feature, AnalysisConfig};
use crate::codec::synth::render;
use crate::error::{Error, Result};
use crate::features::{write_f0_sidecar, CorpusKind, UtteranceRecord};
use crate::fsutil::write_atomic;
use crate::pitch::F0Sequence;
use crate::prompt::{rescale_volume_augment, AttributeLabels, Gender, VocalRange, Volume, VolumeBands};

pub const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
pub const REST: &str = "sil";

/// Relative level of rest frames before volume rescaling.
const REST_LEVEL: f64 = 0.05;
const VIBRATO_HZ: f64 = 5.0;
const VIBRATO_SEMITONES: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Melodies in the training corpus.
    pub melodies: usize,
    /// Attribute combinations each melody is rendered in, taken round-robin
    /// over the twelve, so combinations stay balanced.
    pub renditions: usize,
    pub eval_melodies: usize,
    pub frames: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub volume_bands: VolumeBands,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            melodies: 120,
            renditions: 2,
            eval_melodies: 16,
            frames: 24,
            sample_rate: 24_000,
            hop: 480,
            volume_bands: VolumeBands::default(),
            seed: 1234,
        }
    }
}

/// Voiced-mean F0 span used for each (gender, range) cell. The spans keep a
/// margin from the default category thresholds.
pub fn range_span(gender: Gender, range: VocalRange) -> [f64; 2] {
    match (gender, range) {
        (Gender::Male, VocalRange::Low) => [95.0, 115.0],
        (Gender::Male, VocalRange::High) => [140.0, 165.0],
        (Gender::Female, VocalRange::Low) => [250.0, 285.0],
        (Gender::Female, VocalRange::High) => [330.0, 380.0],
    }
}

fn timbre(gender: Gender) -> [f32; 8] {
    match gender {
        Gender::Male => [1.2, 1.0, 0.2, -0.4, -0.9, -1.5, -2.2, -2.8],
        Gender::Female => [-0.6, 0.4, 1.3, 1.0, 0.2, -0.5, -1.2, -2.0],
    }
}

fn vowel_shape(gender: Gender, phoneme: &str) -> Vec<f32> {
    let mut s = timbre(gender).to_vec();
    if let Some(k) = VOWELS.iter().position(|v| *v == phoneme) {
        s[k + 1] += 0.4;
        s[(k + 4) % 8] -= 0.2;
    }
    s
}

/// A melody: notes with phonemes and semitone offsets, rests as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMelody {
    pub phonemes: Vec<String>,
    pub frames: Vec<usize>,
    pub semitones: Vec<Option<i32>>,
    pub vibrato_phase: f64,
}

impl ToyMelody {
    pub fn random<R: Rng + ?Sized>(total: usize, rng: &mut R) -> Result<Self> {
        if total < 9 {
            return Err(Error::config(format!("toy melodies need at least 9 frames, got {total}")));
        }
        let lead = if rng.random_bool(0.5) { 2 } else { 0 };
        let tail = if rng.random_bool(0.5) { 2 } else { 0 };
        let sung = total - lead - tail;
        let notes = rng.random_range(3..=(sung / 3).min(5));
        // Every note gets 3 frames, the rest is spread at random.
        let mut frames = vec![3usize; notes];
        for _ in 0..sung - 3 * notes {
            frames[rng.random_range(0..notes)] += 1;
        }
        let mut out = Self {
            phonemes: Vec::new(),
            frames: Vec::new(),
            semitones: Vec::new(),
            vibrato_phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        if lead > 0 {
            out.push_rest(lead);
        }
        let mut prev = i32::MAX;
        for n in frames {
            let mut s = rng.random_range(-4..=4);
            while s == prev {
                s = rng.random_range(-4..=4);
            }
            prev = s;
            out.phonemes.push(VOWELS.choose(rng).expect("non-empty").to_string());
            out.frames.push(n);
            out.semitones.push(Some(s));
        }
        if tail > 0 {
            out.push_rest(tail);
        }
        Ok(out)
    }

    fn push_rest(&mut self, n: usize) {
        self.phonemes.push(REST.into());
        self.frames.push(n);
        self.semitones.push(None);
    }

    pub fn len(&self) -> usize {
        self.frames.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn durations(&self, frame_rate: f64) -> Vec<f64> {
        self.frames.iter().map(|&n| n as f64 / frame_rate).collect()
    }

    /// F0 contour with the given voiced mean.
    pub fn contour(&self, mean_hz: f64, frame_rate: f64) -> F0Sequence {
        let mut rel = Vec::with_capacity(self.len());
        let mut t = 0usize;
        for (&n, s) in self.frames.iter().zip(&self.semitones) {
            for _ in 0..n {
                rel.push(s.map_or(0.0, |s| {
                    let phase = std::f64::consts::TAU * VIBRATO_HZ * t as f64 / frame_rate + self.vibrato_phase;
                    2f64.powf((s as f64 + VIBRATO_SEMITONES * phase.sin()) / 12.0)
                }));
                t += 1;
            }
        }
        let voiced: Vec<f64> = rel.iter().copied().filter(|&v| v > 0.0).collect();
        let scale = mean_hz * voiced.len() as f64 / voiced.iter().sum::<f64>();
        F0Sequence(rel.into_iter().map(|v| v * scale).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub id: String,
    pub audio: Waveform,
    pub phonemes: Vec<String>,
    pub durations: Vec<f64>,
    pub f0: F0Sequence,
    pub gender: Gender,
    pub volume: Volume,
    pub range: VocalRange,
}

impl ToyUtterance {
    pub fn labels(&self) -> AttributeLabels {
        AttributeLabels {
            gender: Some(self.gender),
            volume: Some(self.volume),
            vocal_range: Some(self.range),
        }
    }
}

/// Renders `melody` with a timbre, voiced mean F0 and target volume band.
pub fn render_melody<R: Rng + ?Sized>(
    melody: &ToyMelody,
    gender: Gender,
    mean_hz: f64,
    volume: Volume,
    cfg: &ToyConfig,
    rng: &mut R,
) -> Result<(Waveform, F0Sequence)> {
    let frame_rate = cfg.sample_rate as f64 / cfg.hop as f64;
    let f0 = melody.contour(mean_hz, frame_rate);
    let analysis = AnalysisConfig::default();
    let mut feats = Vec::with_capacity(f0.len());
    let mut t = 0usize;
    for (p, &n) in melody.phonemes.iter().zip(&melody.frames) {
        for k in 0..n {
            let hz = f0.values()[t];
            let mut v = Vec::with_capacity(analysis.feature_dim());
            if hz > 0.0 {
                let level = if k == 0 { 0.7 } else { 1.0 } * 0.1;
                v.extend([1.0, (hz / 230.0).log2() as f32, rms_to_feature(level) as f32]);
                v.extend(vowel_shape(gender, p));
            } else {
                v.extend([0.0, 0.0, rms_to_feature(0.1 * REST_LEVEL) as f32]);
                v.extend([0.0f32; 8]);
            }
            feats.push(v);
            t += 1;
        }
    }
    let raw = render(&feats, &analysis, cfg.sample_rate, cfg.hop);
    let (samples, _) = rescale_volume_augment(&raw, volume, &cfg.volume_bands, rng)?;
    Ok((Waveform::new(samples, cfg.sample_rate), f0))
}

fn combos() -> Vec<(Gender, Volume, VocalRange)> {
    let mut out = Vec::new();
    for g in Gender::ALL {
        for v in Volume::ALL {
            for r in VocalRange::ALL {
                out.push((g, v, r));
            }
        }
    }
    out
}

/// Training corpus: each melody in `renditions` attribute combinations.
pub fn generate_corpus(cfg: &ToyConfig) -> Result<Vec<ToyUtterance>> {
    if cfg.renditions == 0 || cfg.renditions > 12 {
        return Err(Error::config(format!("toy renditions must be in 1..=12, got {}", cfg.renditions)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frame_rate = cfg.sample_rate as f64 / cfg.hop as f64;
    let all = combos();
    let mut out = Vec::with_capacity(cfg.melodies * cfg.renditions);
    for m in 0..cfg.melodies {
        let melody = ToyMelody::random(cfg.frames, &mut rng)?;
        for j in 0..cfg.renditions {
            let (g, v, r) = all[(m * cfg.renditions + j) % all.len()];
            let [lo, hi] = range_span(g, r);
            let mean = rng.random_range(lo..=hi);
            let (audio, f0) = render_melody(&melody, g, mean, v, cfg, &mut rng)?;
            out.push(ToyUtterance {
                id: format!("toy-{m:03}-{}-{}-{}", g.name(), v.name(), r.name()),
                audio,
                phonemes: melody.phonemes.clone(),
                durations: melody.durations(frame_rate),
                f0,
                gender: g,
                volume: v,
                range: r,
            });
        }
    }
    Ok(out)
}

/// An evaluation request: a new melody sung by a source voice, and the
/// attributes the prompt will ask for. The source range always differs from
/// the intended one, so copying the input pitch does not score.
#[derive(Debug, Clone)]
pub struct ToyEvalItem {
    pub id: String,
    pub phonemes: Vec<String>,
    pub durations: Vec<f64>,
    pub f0: F0Sequence,
    pub intended: AttributeLabels,
}

pub fn generate_eval_set(cfg: &ToyConfig) -> Result<Vec<ToyEvalItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1_0000);
    let frame_rate = cfg.sample_rate as f64 / cfg.hop as f64;
    let all = combos();
    let mut out = Vec::new();
    for m in 0..cfg.eval_melodies {
        let melody = ToyMelody::random(cfg.frames, &mut rng)?;
        for k in 0..3 {
            let (g, v, r) = all[(3 * m + k) % all.len()];
            let (sg, sr) = if rng.random_bool(0.5) {
                (g, other_range(r))
            } else {
                (other_gender(g), *VocalRange::ALL.choose(&mut rng).expect("non-empty"))
            };
            let [lo, hi] = range_span(sg, sr);
            let f0 = melody.contour(rng.random_range(lo..=hi), frame_rate);
            out.push(ToyEvalItem {
                id: format!("toy-eval-{m:03}-{k}"),
                phonemes: melody.phonemes.clone(),
                durations: melody.durations(frame_rate),
                f0,
                intended: AttributeLabels {
                    gender: Some(g),
                    volume: Some(v),
                    vocal_range: Some(r),
                },
            });
        }
    }
    Ok(out)
}

fn other_range(r: VocalRange) -> VocalRange {
    match r {
        VocalRange::Low => VocalRange::High,
        VocalRange::High => VocalRange::Low,
    }
}

fn other_gender(g: Gender) -> Gender {
    match g {
        Gender::Male => Gender::Female,
        Gender::Female => Gender::Male,
    }
}

/// Writes wavs, F0 sidecars and a JSONL manifest under `dir`.
pub fn write_corpus(dir: &Path, utts: &[ToyUtterance]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for u in utts {
        let wav = dir.join(format!("{}.wav", u.id));
        let f0 = dir.join(format!("{}.f0", u.id));
        u.audio.write_wav(&wav)?;
        write_f0_sidecar(&f0, u.f0.values())?;
        let rec = UtteranceRecord {
            id: u.id.clone(),
            audio: PathBuf::from(format!("{}.wav", u.id)),
            phonemes: u.phonemes.clone(),
            durations: u.durations.clone(),
            f0: PathBuf::from(format!("{}.f0", u.id)),
            gender: Some(u.gender),
            kind: Some(CorpusKind::Singing),
            sample_rate: u.audio.sample_rate,
        };
        lines.push_str(&serde_json::to_string(&rec).map_err(|e| Error::invalid(e.to_string()))?);
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    write_atomic(&manifest, lines.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::analysis::Analyzer;
    use crate::pitch::voiced_mean;
    use crate::prompt::categorize_volume;

    #[test]
    fn melody_fills_requested_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = ToyMelody::random(24, &mut rng).unwrap();
            assert_eq!(m.len(), 24);
            let f0 = m.contour(150.0, 50.0);
            assert!((voiced_mean(&f0).unwrap() - 150.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rendered_utterance_matches_labels() {
        let cfg = ToyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ToyMelody::random(24, &mut rng).unwrap();
        let an = Analyzer::new(AnalysisConfig::default(), cfg.sample_rate, cfg.hop);
        for (g, v, r) in combos() {
            let [lo, hi] = range_span(g, r);
            let (audio, f0) = render_melody(&m, g, 0.5 * (lo + hi), v, &cfg, &mut rng).unwrap();
            assert_eq!(audio.samples.len(), 24 * cfg.hop);
            assert_eq!(categorize_volume(audio.rms(), &cfg.volume_bands).unwrap(), Some(v));
            let track = an.f0_track(&audio.samples);
            let measured: Vec<f64> = track.iter().zip(f0.values()).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, _)| *a).collect();
            let mean = measured.iter().sum::<f64>() / measured.len() as f64;
            assert!(mean > lo * 0.9 && mean < hi * 1.1, "{g:?} {r:?}: {mean}");
        }
    }
}
