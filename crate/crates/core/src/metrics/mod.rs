//! Objective evaluation: rescaled F0 frame error, soft-margin attribute
//! accuracy and gender classification.

mod gender;

pub use gender::{GenderClassifier, SpectralGenderClassifier};

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::{AnalysisConfig, Analyzer};
use crate::error::{Error, Result};
use crate::pitch::{voiced_mean, F0Sequence};
use crate::prompt::{AttributeLabels, Gender, RangeThresholds, VocalRange, Volume, VolumeBands};

/// Relative pitch deviation above which a voiced frame counts as an error.
pub const FFE_PITCH_TOLERANCE: f64 = 0.2;
/// Soft-margin decay for vocal-range accuracy (per Hz).
pub const RANGE_DECAY: f64 = 0.05;

/// Soft-margin decay rate for a volume category.
pub fn volume_decay(volume: Volume) -> f64 {
    match volume {
        Volume::High => 10.0,
        Volume::Medium => 20.0,
        Volume::Low => 30.0,
    }
}

/// F0 frame error after rescaling both voiced parts to the mean of their
/// voiced means.
pub fn rffe(f0_syn: &F0Sequence, f0_ref: &F0Sequence) -> Result<f64> {
    if f0_syn.len() != f0_ref.len() {
        return Err(Error::invalid(format!(
            "rffe needs equal lengths, got {} and {}",
            f0_syn.len(),
            f0_ref.len()
        )));
    }
    let ms = voiced_mean(f0_syn).map_err(|_| Error::UndefinedMetric("synthesized f0 is all unvoiced".into()))?;
    let mr = voiced_mean(f0_ref).map_err(|_| Error::UndefinedMetric("reference f0 is all unvoiced".into()))?;
    let m = (ms + mr) / 2.0;
    let (ks, kr) = (m / ms, m / mr);
    let errors = f0_syn
        .values()
        .iter()
        .zip(f0_ref.values())
        .filter(|(&s, &r)| match (s > 0.0, r > 0.0) {
            (true, true) => {
                // log ratio keeps the test symmetric in its arguments
                ((s * ks) / (r * kr)).ln().abs() > (1.0 + FFE_PITCH_TOLERANCE).ln()
            }
            (false, false) => false,
            _ => true,
        })
        .count();
    Ok(errors as f64 / f0_syn.len() as f64)
}

/// 100 inside `[lo, hi]`, otherwise `100·exp(−k·ε)` with ε the distance to
/// the nearest boundary. `hi` may be infinite.
pub fn soft_accuracy(value: f64, lo: f64, hi: f64, k: f64) -> f64 {
    let eps = if value < lo {
        lo - value
    } else if value > hi {
        value - hi
    } else {
        0.0
    };
    100.0 * (-k * eps).exp()
}

/// Target band for a vocal-range category: high is `[thr, ∞)`, low `(0, thr]`.
pub fn range_band(range: VocalRange, gender: Gender, thresholds: &RangeThresholds) -> (f64, f64) {
    let thr = thresholds.for_gender(gender);
    match range {
        VocalRange::High => (thr, f64::INFINITY),
        VocalRange::Low => (0.0, thr),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub volume_bands: VolumeBands,
    pub range_thresholds: RangeThresholds,
    pub analysis: AnalysisConfig,
    pub hop: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            volume_bands: VolumeBands::default(),
            range_thresholds: RangeThresholds::default(),
            analysis: AnalysisConfig::default(),
            hop: 480,
        }
    }
}

/// One synthesized item with the labels its prompt asked for.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub audio: Waveform,
    pub intended: AttributeLabels,
    /// Input melody contour, for R-FFE.
    pub reference_f0: Option<F0Sequence>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemDiagnostics {
    pub id: String,
    pub rms: f64,
    pub voiced_mean_hz: Option<f64>,
    pub predicted_gender: Option<Gender>,
    pub gender_correct: Option<bool>,
    pub volume_accuracy: Option<f64>,
    pub range_accuracy: Option<f64>,
    pub rffe: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub accuracy: Option<f64>,
    pub count: usize,
}

impl AttributeScore {
    fn from_values(v: &[f64]) -> Self {
        Self {
            accuracy: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
            count: v.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gender_female: AttributeScore,
    pub gender_male: AttributeScore,
    pub gender: AttributeScore,
    pub volume: AttributeScore,
    pub range: AttributeScore,
    pub rffe: AttributeScore,
    pub items: usize,
    pub skipped: usize,
    pub diagnostics: Vec<ItemDiagnostics>,
}

impl EvalReport {
    /// One-line table row: gender F/M, volume, range, R-FFE.
    pub fn summary(&self) -> String {
        let pct = |s: &AttributeScore| s.accuracy.map_or("-".into(), |a| format!("{a:.1}"));
        format!(
            "Gender (F/M) {} / {} | Volume {} | Range {} | R-FFE {}",
            pct(&self.gender_female),
            pct(&self.gender_male),
            pct(&self.volume),
            pct(&self.range),
            self.rffe.accuracy.map_or("-".into(), |a| format!("{a:.3}")),
        )
    }
}

/// Scores every item against its intended labels.
///
/// Items that lack something a present label needs (a classifier for
/// gender, an intended gender for range, a voiced output) get a note and
/// are counted in `skipped`; their other attributes are still scored.
pub fn evaluate_batch(
    items: &[EvalItem],
    classifier: Option<&dyn GenderClassifier>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        items: items.len(),
        ..Default::default()
    };
    let (mut g_f, mut g_m, mut vol, mut rng_acc, mut ffe) = (vec![], vec![], vec![], vec![], vec![]);
    for item in items {
        let analyzer = Analyzer::new(cfg.analysis, item.audio.sample_rate, cfg.hop);
        let track = F0Sequence(analyzer.f0_track(&item.audio.samples));
        let mean = voiced_mean(&track).ok();
        let mut d = ItemDiagnostics {
            id: item.id.clone(),
            rms: item.audio.rms(),
            voiced_mean_hz: mean,
            ..Default::default()
        };
        let mut skipped = false;

        if let Some(g) = item.intended.gender {
            match classifier {
                Some(c) => {
                    let (pred, _) = c.classify(&item.audio)?;
                    let ok = pred == g;
                    d.predicted_gender = Some(pred);
                    d.gender_correct = Some(ok);
                    let v = if ok { 100.0 } else { 0.0 };
                    match g {
                        Gender::Female => g_f.push(v),
                        Gender::Male => g_m.push(v),
                    }
                }
                None => {
                    d.notes.push("no gender classifier loaded".into());
                    skipped = true;
                }
            }
        }
        if let Some(v) = item.intended.volume {
            let [lo, hi] = cfg.volume_bands.band(v);
            let a = soft_accuracy(d.rms, lo, hi, volume_decay(v));
            d.volume_accuracy = Some(a);
            vol.push(a);
        }
        if let Some(r) = item.intended.vocal_range {
            match (item.intended.gender, mean) {
                (Some(g), Some(m)) => {
                    let (lo, hi) = range_band(r, g, &cfg.range_thresholds);
                    let a = soft_accuracy(m, lo, hi, RANGE_DECAY);
                    d.range_accuracy = Some(a);
                    rng_acc.push(a);
                }
                (None, _) => {
                    d.notes.push("range label without gender".into());
                    skipped = true;
                }
                (_, None) => {
                    d.notes.push("output has no voiced frames; range scored 0".into());
                    d.range_accuracy = Some(0.0);
                    rng_acc.push(0.0);
                }
            }
        }
        match &item.reference_f0 {
            Some(reference) => {
                let n = reference.len().min(track.len());
                let a = F0Sequence(track.values()[..n].to_vec());
                let b = F0Sequence(reference.values()[..n].to_vec());
                match rffe(&a, &b) {
                    Ok(e) => {
                        d.rffe = Some(e);
                        ffe.push(e);
                    }
                    Err(e) => {
                        d.notes.push(format!("rffe skipped: {e}"));
                        skipped = true;
                    }
                }
            }
            None => {
                d.notes.push("no reference f0".into());
                skipped = true;
            }
        }
        if skipped {
            report.skipped += 1;
            tracing::warn!(id = %item.id, notes = ?d.notes, "evaluation item partially skipped");
        }
        report.diagnostics.push(d);
    }
    let mut g_all = g_f.clone();
    g_all.extend(&g_m);
    report.gender_female = AttributeScore::from_values(&g_f);
    report.gender_male = AttributeScore::from_values(&g_m);
    report.gender = AttributeScore::from_values(&g_all);
    report.volume = AttributeScore::from_values(&vol);
    report.range = AttributeScore::from_values(&rng_acc);
    report.rffe = AttributeScore::from_values(&ffe);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(v: &[f64]) -> F0Sequence {
        F0Sequence(v.to_vec())
    }

    #[test]
    fn rffe_examples() {
        let r = f(&[100.0, 150.0, 0.0, 200.0]);
        assert_eq!(rffe(&r, &r).unwrap(), 0.0);
        assert_eq!(rffe(&r.scaled(1.5), &r).unwrap(), 0.0);
        let reference = f(&[200.0; 4]);
        let syn = f(&[200.0, 200.0, 0.0, 0.0]);
        assert_eq!(rffe(&syn, &reference).unwrap(), 0.5);
    }

    #[test]
    fn rffe_errors() {
        assert!(matches!(rffe(&f(&[1.0]), &f(&[1.0, 2.0])), Err(Error::InvalidInput(_))));
        assert!(matches!(rffe(&f(&[0.0]), &f(&[1.0])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn soft_accuracy_examples() {
        assert_eq!(soft_accuracy(0.18, 0.16, 0.20, 10.0), 100.0);
        assert!((soft_accuracy(115.0, 125.0, f64::INFINITY, 0.05) - 60.653_065_971_263_34).abs() < 1e-9);
        assert!((soft_accuracy(0.22, 0.16, 0.20, 10.0) - 81.873_075_307_798_19).abs() < 1e-9);
    }
}
