use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusKind, UtteranceRecord};

/// Hour caps per corpus kind and the sampling share of singing data.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataMix {
    pub singing_hours: Option<f64>,
    pub speech_hours: Option<f64>,
    /// Probability that a training draw comes from singing data. `None`
    /// samples proportionally to corpus size.
    pub singing_share: Option<f64>,
}

impl DataMix {
    fn cap_secs(&self, kind: CorpusKind) -> Option<f64> {
        match kind {
            CorpusKind::Singing => self.singing_hours,
            CorpusKind::Speech => self.speech_hours,
        }
        .map(|h| h * 3600.0)
    }
}

/// Shuffles each kind and keeps utterances until its cap is reached, so each
/// kind overshoots its cap by less than one utterance. Returns record indices
/// in ascending order.
pub fn select_by_caps<R: Rng + ?Sized>(records: &[UtteranceRecord], mix: &DataMix, rng: &mut R) -> Vec<usize> {
    let mut selected = Vec::new();
    for kind in [CorpusKind::Singing, CorpusKind::Speech] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].kind() == kind).collect();
        match mix.cap_secs(kind) {
            None => selected.extend(idx),
            Some(cap) => {
                idx.shuffle(rng);
                let mut total = 0.0;
                for i in idx {
                    if total >= cap {
                        break;
                    }
                    total += records[i].duration_secs();
                    selected.push(i);
                }
            }
        }
    }
    selected.sort_unstable();
    selected
}

/// Draws training items from the singing and speech pools.
#[derive(Debug, Clone)]
pub struct MixSampler {
    singing: Vec<usize>,
    speech: Vec<usize>,
    singing_share: f64,
}

impl MixSampler {
    pub fn new(records: &[UtteranceRecord], selected: &[usize], mix: &DataMix) -> Self {
        let (singing, speech): (Vec<usize>, Vec<usize>) = selected
            .iter()
            .partition(|&&i| records[i].kind() == CorpusKind::Singing);
        let proportional = singing.len() as f64 / (singing.len() + speech.len()).max(1) as f64;
        let singing_share = match (singing.is_empty(), speech.is_empty()) {
            (true, _) => 0.0,
            (_, true) => 1.0,
            _ => mix.singing_share.unwrap_or(proportional).clamp(0.0, 1.0),
        };
        Self {
            singing,
            speech,
            singing_share,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.singing.is_empty() && self.speech.is_empty()
    }

    pub fn singing_share(&self) -> f64 {
        self.singing_share
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let pool = if rng.random_bool(self.singing_share) {
            &self.singing
        } else {
            &self.speech
        };
        if pool.is_empty() {
            None
        } else {
            Some(pool[rng.random_range(0..pool.len())])
        }
    }
}
