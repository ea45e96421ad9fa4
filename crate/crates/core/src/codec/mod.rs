//! Toy residual-vector-quantized codec.
//!
//! Audio is analysed into per-frame vectors (voicing, log-F0, log-energy and a
//! mel-band envelope). The encoder standardises and weights them; a stack of
//! RVQ codebooks turns the result into indices. Decoding inverts the affine
//! map and renders a harmonic-plus-noise waveform.

pub mod analysis;
pub mod rvq;
pub mod synth;
pub mod units;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub use analysis::{AnalysisConfig, Analyzer};
pub use rvq::{rvq_quantize, rvq_reconstruct, Codebook, RvqTrainConfig};
pub use units::AcousticUnitSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Codebooks exposed as acoustic units.
    pub n_q: usize,
    /// Quantizer depth trained.
    pub levels: usize,
    pub codebook_size: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub analysis: AnalysisConfig,
    /// Encoder weights for voicing, log-F0 and energy; bands use 1.
    pub weights: [f32; 3],
    pub train: RvqTrainConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_q: 3,
            levels: 12,
            codebook_size: 64,
            sample_rate: 24_000,
            hop: 480,
            analysis: AnalysisConfig::default(),
            weights: [2.0, 3.0, 1.5],
            train: RvqTrainConfig::default(),
        }
    }
}

impl CodecConfig {
    pub fn feature_dim(&self) -> usize {
        self.analysis.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.n_q > self.levels {
            return Err(Error::config(format!(
                "n_q {} must be in 1..={} (quantizer levels)",
                self.n_q, self.levels
            )));
        }
        if self.codebook_size < 1 || self.codebook_size > 1 << 16 {
            return Err(Error::config(format!("codebook size {} out of range", self.codebook_size)));
        }
        if self.hop == 0 || self.sample_rate == 0 {
            return Err(Error::config("hop and sample rate must be positive"));
        }
        Ok(())
    }
}

/// Per-dimension affine map between analysis features and the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl FeatureNorm {
    pub fn fit(data: &[Vec<f32>], weights: &[f32; 3]) -> Self {
        let dim = data[0].len();
        let n = data.len() as f64;
        let mut mean = vec![0f64; dim];
        for x in data {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += *v as f64 / n;
            }
        }
        let mut var = vec![0f64; dim];
        for x in data {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (*v as f64 - m).powi(2) / n;
            }
        }
        let scale = (0..dim)
            .map(|d| {
                let w = weights.get(d).copied().unwrap_or(1.0);
                w / (var[d].sqrt() as f32).max(1e-3)
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale,
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn inverse(&self, z: &[f32]) -> Vec<f32> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| v / s + m)
            .collect()
    }
}

/// Trained codec parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    pub config: CodecConfig,
    pub norm: FeatureNorm,
    pub codebooks: Vec<Codebook>,
}

/// Loss curve and usage statistics from [`train_codec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub train_utterances: usize,
    pub heldout_utterances: usize,
    /// Held-out mean squared latent residual at `n_q` levels, per epoch
    /// (index 0 is the initialisation).
    pub heldout_loss: Vec<f32>,
    /// Fraction of codewords of the first `n_q` stages hit by training data.
    pub utilization: f32,
}

impl CodecTrainReport {
    pub fn initial_loss(&self) -> f32 {
        self.heldout_loss[0]
    }

    pub fn final_loss(&self) -> f32 {
        *self.heldout_loss.last().unwrap()
    }
}

fn analyzer_for(cfg: &CodecConfig) -> Analyzer {
    Analyzer::new(cfg.analysis, cfg.sample_rate, cfg.hop)
}

fn check_rate(cfg: &CodecConfig, audio: &Waveform) -> Result<()> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "audio is {} Hz; codec expects {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    Ok(())
}

/// Trains the encoder normalisation and all RVQ levels on `corpus`.
///
/// One utterance in ten (at least one) is held out for the loss curve.
pub fn train_codec(corpus: &[Waveform], cfg: &CodecConfig, seed: u64) -> Result<(Codec, CodecTrainReport)> {
    cfg.validate()?;
    if corpus.len() < 10 {
        return Err(Error::config(format!(
            "codec training needs at least 10 utterances, got {}",
            corpus.len()
        )));
    }
    for a in corpus {
        check_rate(cfg, a)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_held = (corpus.len() / 10).max(1);
    let (held_idx, train_idx) = order.split_at(n_held);

    let analyzer = analyzer_for(cfg);
    let feats = |idx: &[usize]| -> Vec<Vec<f32>> {
        idx.iter().flat_map(|&i| analyzer.features(&corpus[i].samples)).collect()
    };
    let train_raw = feats(train_idx);
    let held_raw = feats(held_idx);
    if train_raw.is_empty() {
        return Err(Error::config("codec training corpus has no frames"));
    }
    let norm = FeatureNorm::fit(&train_raw, &cfg.weights);
    let train: Vec<Vec<f32>> = train_raw.iter().map(|x| norm.forward(x)).collect();
    let held: Vec<Vec<f32>> = held_raw.iter().map(|x| norm.forward(x)).collect();

    let mut books = rvq::init_codebooks(&train, cfg.levels, cfg.codebook_size, &mut rng)?;
    let mut counts: Vec<Vec<f32>> = books.iter().map(|b| vec![1.0; b.size()]).collect();
    let mut sums: Vec<Vec<f32>> = books.iter().map(|b| b.data.clone()).collect();
    let mut heldout_loss = vec![rvq::mean_residual(&held, &books, cfg.n_q)];
    for epoch in 0..cfg.train.epochs {
        rvq::ema_epoch(&train, &mut books, &mut counts, &mut sums, &cfg.train, &mut rng);
        let loss = rvq::mean_residual(&held, &books, cfg.n_q);
        tracing::debug!(epoch, loss, "codec epoch");
        heldout_loss.push(loss);
    }

    let mut used = vec![vec![false; cfg.codebook_size]; cfg.n_q];
    for x in &train {
        let (idx, _) = rvq_quantize(x, &books[..cfg.n_q])?;
        for (c, i) in idx.into_iter().enumerate() {
            used[c][i] = true;
        }
    }
    let utilization = used.iter().flatten().filter(|&&u| u).count() as f32 / (cfg.n_q * cfg.codebook_size) as f32;

    let report = CodecTrainReport {
        train_utterances: train_idx.len(),
        heldout_utterances: held_idx.len(),
        heldout_loss,
        utilization,
    };
    Ok((
        Codec {
            config: cfg.clone(),
            norm,
            codebooks: books,
        },
        report,
    ))
}

impl Codec {
    pub fn analyzer(&self) -> Analyzer {
        analyzer_for(&self.config)
    }

    /// Analysis features of `audio`, one vector per hop.
    pub fn features(&self, audio: &Waveform) -> Result<Vec<Vec<f32>>> {
        check_rate(&self.config, audio)?;
        Ok(self.analyzer().features(&audio.samples))
    }

    pub fn encode(&self, audio: &Waveform) -> Result<AcousticUnitSequence> {
        let feats = self.features(audio)?;
        self.encode_features(&feats)
    }

    pub fn encode_features(&self, feats: &[Vec<f32>]) -> Result<AcousticUnitSequence> {
        let books = &self.codebooks[..self.config.n_q];
        let frames = feats
            .iter()
            .map(|x| {
                if x.len() != self.config.feature_dim() {
                    return Err(Error::invalid(format!(
                        "feature dim {} != {}",
                        x.len(),
                        self.config.feature_dim()
                    )));
                }
                let (idx, _) = rvq_quantize(&self.norm.forward(x), books)?;
                Ok(idx.into_iter().map(|i| i as u32).collect())
            })
            .collect::<Result<Vec<Vec<u32>>>>()?;
        AcousticUnitSequence::new(self.config.n_q, self.config.codebook_size, frames)
    }

    fn check_units(&self, units: &AcousticUnitSequence) -> Result<()> {
        if units.n_q() != self.config.n_q || units.codebook_size() != self.config.codebook_size {
            return Err(Error::invalid(format!(
                "units are {}x{}, codec is n_q={} K={}",
                units.n_q(),
                units.codebook_size(),
                self.config.n_q,
                self.config.codebook_size
            )));
        }
        Ok(())
    }

    /// Reconstructed analysis features using the first `levels` codes per frame.
    pub fn decode_features_with(&self, units: &AcousticUnitSequence, levels: usize) -> Result<Vec<Vec<f32>>> {
        self.check_units(units)?;
        let levels = levels.clamp(1, self.config.n_q);
        Ok(units
            .frames()
            .iter()
            .map(|f| {
                let idx: Vec<usize> = f[..levels].iter().map(|&i| i as usize).collect();
                self.norm.inverse(&rvq_reconstruct(&idx, &self.codebooks))
            })
            .collect())
    }

    pub fn decode_features(&self, units: &AcousticUnitSequence) -> Result<Vec<Vec<f32>>> {
        self.decode_features_with(units, self.config.n_q)
    }

    /// Waveform of exactly `T * hop` samples.
    pub fn decode(&self, units: &AcousticUnitSequence) -> Result<Waveform> {
        let feats = self.decode_features(units)?;
        let samples = synth::render(&feats, &self.config.analysis, self.config.sample_rate, self.config.hop);
        Ok(Waveform::new(samples, self.config.sample_rate))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::data(format!("codec serialisation: {e}")))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let codec: Codec = serde_json::from_slice(bytes).map_err(|e| Error::data(format!("codec file: {e}")))?;
        codec.config.validate()?;
        let dim = codec.config.feature_dim();
        if codec.codebooks.len() < codec.config.n_q
            || codec.codebooks.iter().any(|b| b.dim != dim || b.size() != codec.config.codebook_size)
            || codec.norm.mean.len() != dim
            || codec.norm.scale.len() != dim
        {
            return Err(Error::data("codec file shapes disagree with its config"));
        }
        Ok(codec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }
}

/// Mean squared difference of the energy and band-envelope dimensions,
/// averaged over frames (a log-mel distortion).
pub fn spectral_distortion(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            x[analysis::LOG_RMS..]
                .iter()
                .zip(&y[analysis::LOG_RMS..])
                .map(|(p, q)| ((p - q) as f64).powi(2))
                .sum::<f64>()
                / (x.len() - analysis::LOG_RMS) as f64
        })
        .sum();
    total / n as f64
}
