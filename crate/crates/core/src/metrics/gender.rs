//! Binary gender classification from the spectral envelope.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::analysis::{AnalysisConfig, Analyzer};
use crate::error::{Error, Result};
use crate::prompt::Gender;

/// Anything that can label a recording male or female with a confidence in
/// `[0.5, 1]`.
pub trait GenderClassifier {
    fn classify(&self, audio: &Waveform) -> Result<(Gender, f64)>;
}

/// Logistic regression on the mean band envelope of voiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGenderClassifier {
    pub analysis: AnalysisConfig,
    pub hop: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Weights then bias; positive logit means female.
    pub weights: Vec<f64>,
    pub trained: bool,
}

impl SpectralGenderClassifier {
    pub fn untrained(analysis: AnalysisConfig, hop: usize) -> Self {
        Self {
            analysis,
            hop,
            mean: vec![],
            scale: vec![],
            weights: vec![],
            trained: false,
        }
    }

    /// Mean band envelope over voiced frames (all frames if none voiced).
    pub fn embed(&self, audio: &Waveform) -> Vec<f64> {
        let frames = Analyzer::new(self.analysis, audio.sample_rate, self.hop).analyze(&audio.samples);
        let voiced: Vec<_> = frames.iter().filter(|f| f.f0 > 0.0).collect();
        let pool: Vec<_> = if voiced.is_empty() { frames.iter().collect() } else { voiced };
        let mut out = vec![0.0; self.analysis.n_bands];
        for f in &pool {
            for (o, b) in out.iter_mut().zip(&f.band_shape) {
                *o += b / pool.len().max(1) as f64;
            }
        }
        out
    }

    fn logit(&self, x: &[f64]) -> f64 {
        let d = x.len();
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum::<f64>()
            + self.weights[d]
    }

    /// Full-batch gradient descent on the logistic loss.
    pub fn train(
        analysis: AnalysisConfig,
        hop: usize,
        data: &[(Waveform, Gender)],
        epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        if !Gender::ALL.iter().all(|g| data.iter().any(|(_, l)| l == g)) {
            return Err(Error::config("gender classifier needs examples of both genders"));
        }
        let mut clf = Self::untrained(analysis, hop);
        let mut xs: Vec<(Vec<f64>, f64)> = data
            .iter()
            .map(|(a, g)| (clf.embed(a), if *g == Gender::Female { 1.0 } else { 0.0 }))
            .collect();
        xs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let d = analysis.n_bands;
        let n = xs.len() as f64;
        clf.mean = (0..d).map(|j| xs.iter().map(|(x, _)| x[j]).sum::<f64>() / n).collect();
        clf.scale = (0..d)
            .map(|j| {
                let var = xs.iter().map(|(x, _)| (x[j] - clf.mean[j]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-6)
            })
            .collect();
        clf.weights = vec![0.0; d + 1];
        let lr = 0.5;
        let l2 = 1e-3;
        for _ in 0..epochs {
            let mut grad = vec![0.0; d + 1];
            for (x, y) in &xs {
                let p = 1.0 / (1.0 + (-clf.logit(x)).exp());
                for j in 0..d {
                    grad[j] += (p - y) * (x[j] - clf.mean[j]) / clf.scale[j] / n;
                }
                grad[d] += (p - y) / n;
            }
            for j in 0..=d {
                let reg = if j < d { l2 * clf.weights[j] } else { 0.0 };
                clf.weights[j] -= lr * (grad[j] + reg);
            }
        }
        clf.trained = true;
        Ok(clf)
    }
}

impl GenderClassifier for SpectralGenderClassifier {
    fn classify(&self, audio: &Waveform) -> Result<(Gender, f64)> {
        if !self.trained {
            return Err(Error::Untrained("gender classifier has not been trained".into()));
        }
        let p = 1.0 / (1.0 + (-self.logit(&self.embed(audio))).exp());
        Ok(if p >= 0.5 {
            (Gender::Female, p)
        } else {
            (Gender::Male, 1.0 - p)
        })
    }
}
