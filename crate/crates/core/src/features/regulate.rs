use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

/// Frames per second of the acoustic unit grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRate {
    pub hz: f64,
    /// False when the hop does not divide the sample rate.
    pub exact: bool,
}

pub fn frame_rate_of(sample_rate: u32, hop: i64) -> Result<FrameRate> {
    if hop <= 0 {
        return Err(Error::invalid(format!("hop must be positive, got {hop}")));
    }
    let exact = sample_rate as i64 % hop == 0;
    if !exact {
        warn!(sample_rate, hop, "hop does not divide the sample rate; frame rate is fractional");
    }
    Ok(FrameRate {
        hz: sample_rate as f64 / hop as f64,
        exact,
    })
}

/// Phoneme inventory. Id 0 is reserved for unknown phonemes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl PhonemeVocab {
    pub const UNKNOWN: &'static str = "<unk>";

    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: Vec<String> = symbols.into_iter().map(Into::into).collect();
        set.sort();
        set.dedup();
        set.retain(|s| s != Self::UNKNOWN);
        let mut all = vec![Self::UNKNOWN.to_string()];
        all.extend(set);
        Self::from_ordered(all)
    }

    fn from_ordered(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { symbols, index }
    }

    /// Restores the lookup index after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_ordered(self.symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.index.get(symbol).copied().unwrap_or(0)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }
}

/// Phonemes repeated to the acoustic frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeFrameSequence {
    pub phoneme_ids: Vec<u32>,
    pub phonemes: Vec<String>,
    pub durations: Vec<f64>,
}

impl PhonemeFrameSequence {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    /// Crops or extends (repeating the last frame) to exactly `frames`.
    pub fn fit_to(&mut self, frames: usize) {
        let last = self.phoneme_ids.last().copied().unwrap_or(0);
        self.phoneme_ids.resize(frames, last);
    }
}

/// Per-item frame counts from cumulative-boundary rounding: item `i` spans
/// `round(c_i * rate) - round(c_{i-1} * rate)` frames where `c_i` is the
/// cumulative duration. Total length never drifts from the rounded total.
pub fn frame_counts(durations_sec: &[f64], frame_rate: f64) -> Result<Vec<usize>> {
    let mut cumulative = 0.0;
    let mut prev_boundary = 0i64;
    let mut counts = Vec::with_capacity(durations_sec.len());
    for (i, &d) in durations_sec.iter().enumerate() {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("duration {i} is {d}; durations must be >= 0")));
        }
        cumulative += d;
        let boundary = (cumulative * frame_rate).round() as i64;
        counts.push((boundary - prev_boundary) as usize);
        prev_boundary = boundary;
    }
    Ok(counts)
}

/// Duplicates each phoneme for its duration at `frame_rate`.
pub fn regulate(
    phonemes: &[String],
    durations_sec: &[f64],
    frame_rate: f64,
    vocab: &PhonemeVocab,
) -> Result<PhonemeFrameSequence> {
    if phonemes.len() != durations_sec.len() {
        return Err(Error::invalid(format!(
            "{} phonemes but {} durations",
            phonemes.len(),
            durations_sec.len()
        )));
    }
    let counts = frame_counts(durations_sec, frame_rate)?;
    let phoneme_ids = phonemes
        .iter()
        .zip(&counts)
        .flat_map(|(p, &n)| std::iter::repeat_n(vocab.id(p), n))
        .collect();
    Ok(PhonemeFrameSequence {
        phoneme_ids,
        phonemes: phonemes.to_vec(),
        durations: durations_sec.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_phoneme() {
        let vocab = PhonemeVocab::from_symbols(["a"]);
        let r = regulate(&strs(&["a"]), &[0.1], 50.0, &vocab).unwrap();
        assert_eq!(r.phoneme_ids, vec![vocab.id("a"); 5]);
    }

    #[test]
    fn cumulative_rounding() {
        let vocab = PhonemeVocab::from_symbols(["a", "b"]);
        let counts = frame_counts(&[0.03, 0.03], 50.0).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 3);
        assert!(counts == vec![2, 1] || counts == vec![1, 2]);
        let r = regulate(&strs(&["a", "b"]), &[0.03, 0.03], 50.0, &vocab).unwrap();
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn empty_and_zero_duration() {
        let vocab = PhonemeVocab::from_symbols(["a", "b"]);
        assert!(regulate(&[], &[], 50.0, &vocab).unwrap().is_empty());
        let r = regulate(&strs(&["a", "b"]), &[0.0, 0.1], 50.0, &vocab).unwrap();
        assert_eq!(r.phoneme_ids, vec![vocab.id("b"); 5]);
    }

    #[test]
    fn negative_duration_rejected() {
        let vocab = PhonemeVocab::from_symbols(["a"]);
        assert!(regulate(&strs(&["a"]), &[-0.1], 50.0, &vocab).is_err());
        assert!(regulate(&strs(&["a"]), &[0.1, 0.2], 50.0, &vocab).is_err());
    }

    #[test]
    fn frame_rates() {
        let fr = frame_rate_of(24000, 480).unwrap();
        assert_eq!(fr.hz, 50.0);
        assert!(fr.exact);
        assert_eq!(frame_rate_of(16000, 320).unwrap().hz, 50.0);
        let odd = frame_rate_of(24000, 479).unwrap();
        assert!(!odd.exact);
        assert!((odd.hz - 50.104_384_133_611_69).abs() < 1e-9);
        assert!(frame_rate_of(24000, 0).is_err());
        assert!(frame_rate_of(24000, -480).is_err());
    }

    #[test]
    fn unknown_phoneme_maps_to_zero() {
        let vocab = PhonemeVocab::from_symbols(["b", "a", "a"]);
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.id("zz"), 0);
        assert_eq!(vocab.symbol(vocab.id("b")), Some("b"));
    }
}
