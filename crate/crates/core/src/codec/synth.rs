//! Harmonic-plus-noise renderer turning analysis frames back into audio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::analysis::{band_centres_mel, feature_to_rms, hz_to_mel, AnalysisConfig, BANDS, F0_REF_HZ, LOG_F0, LOG_RMS, VOICING};

/// Samples of linear parameter crossfade at the end of each frame.
const CROSSFADE: usize = 48;
const NOISE_SEED: u64 = 0x5eed_a0d1_0000_0001;

struct FrameParams {
    voiced: f64,
    f0: f64,
    gain: f64,
    /// Harmonic amplitudes normalized to unit RMS.
    amps: Vec<f64>,
}

fn frame_params(feat: &[f32], cfg: &AnalysisConfig, centres: &[f64]) -> FrameParams {
    let voiced = if feat[VOICING] > 0.5 { 1.0 } else { 0.0 };
    let f0 = (F0_REF_HZ * 2f64.powf(feat[LOG_F0] as f64)).clamp(cfg.f0_min_hz * 0.5, cfg.f0_max_hz * 2.0);
    let gain = feature_to_rms(feat[LOG_RMS] as f64);
    let shape = &feat[BANDS..];
    let n_harm = ((cfg.band_hi_hz / f0).floor() as usize).max(1);
    let mut amps: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let m = hz_to_mel(k as f64 * f0);
            let log_p = interp(centres, shape, m);
            (0.5 * log_p).exp()
        })
        .collect();
    let power: f64 = amps.iter().map(|a| a * a / 2.0).sum();
    let norm = power.sqrt().max(1e-12);
    amps.iter_mut().for_each(|a| *a /= norm);
    FrameParams {
        voiced,
        f0,
        gain,
        amps,
    }
}

/// Quadratic phase offsets keep the summed harmonics from forming a
/// pulse train, so short-window energy stays close to the frame gain.
fn harmonic_phase(k: usize) -> f64 {
    std::f64::consts::PI * (k * (k - 1)) as f64 / 64.0
}

fn interp(xs: &[f64], ys: &[f32], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0] as f64;
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last] as f64;
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let a = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] as f64 * (1.0 - a) + ys[i + 1] as f64 * a
}

/// Renders one hop of audio per feature frame.
pub fn render(features: &[Vec<f32>], cfg: &AnalysisConfig, sample_rate: u32, hop: usize) -> Vec<f32> {
    let centres = band_centres_mel(cfg);
    let params: Vec<FrameParams> = features.iter().map(|f| frame_params(f, cfg, &centres)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(NOISE_SEED);
    let mut out = Vec::with_capacity(features.len() * hop);
    let mut phase = 0.0f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let fade = CROSSFADE.min(hop);
    let mut amps = Vec::new();
    let max_harm = params.iter().map(|p| p.amps.len()).max().unwrap_or(1);
    let offsets: Vec<(f64, f64)> = (0..max_harm).map(|k| harmonic_phase(k + 1).sin_cos()).collect();
    for (t, cur) in params.iter().enumerate() {
        let next = params.get(t + 1);
        for p in 0..hop {
            let alpha = match next {
                Some(_) if p >= hop - fade => (p + 1 - (hop - fade)) as f64 / (fade + 1) as f64,
                _ => 0.0,
            };
            let (voiced, f0, gain) = match next {
                Some(n) if alpha > 0.0 => (
                    cur.voiced + alpha * (n.voiced - cur.voiced),
                    cur.f0 + alpha * (n.f0 - cur.f0),
                    cur.gain + alpha * (n.gain - cur.gain),
                ),
                _ => (cur.voiced, cur.f0, cur.gain),
            };
            phase = (phase + two_pi * f0 / sample_rate as f64) % two_pi;
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mut harm = 0.0;
            if voiced > 0.0 {
                amps.clear();
                match next {
                    Some(n) if alpha > 0.0 => {
                        let k = cur.amps.len().max(n.amps.len());
                        amps.extend((0..k).map(|i| {
                            let a = cur.amps.get(i).copied().unwrap_or(0.0);
                            let b = n.amps.get(i).copied().unwrap_or(0.0);
                            a + alpha * (b - a)
                        }));
                    }
                    _ => amps.extend_from_slice(&cur.amps),
                }
                // sin(k*phase + theta_k) via a complex rotation recurrence
                let (s1, c1) = phase.sin_cos();
                let (mut sk, mut ck) = (s1, c1);
                for (k, &a) in amps.iter().enumerate() {
                    let (st, ct) = offsets[k.min(offsets.len() - 1)];
                    harm += a * (sk * ct + ck * st);
                    let s_next = sk * c1 + ck * s1;
                    ck = ck * c1 - sk * s1;
                    sk = s_next;
                }
            }
            out.push((gain * (voiced * harm + (1.0 - voiced) * noise)) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::analysis::{Analyzer, FrameAnalysis};
    use super::*;

    #[test]
    fn rendered_tone_analyzes_back() {
        let cfg = AnalysisConfig::default();
        let shape = vec![2.0, 1.0, 0.5, 0.0, -0.5, -1.0, -1.5, -2.0];
        let frame = FrameAnalysis {
            f0: 180.0,
            rms: 0.08,
            band_shape: shape.clone(),
        };
        let feats = vec![frame.to_features(); 20];
        let audio = render(&feats, &cfg, 24000, 480);
        assert_eq!(audio.len(), 20 * 480);
        let back = Analyzer::new(cfg, 24000, 480).analyze(&audio);
        // hop RMS of a 180 Hz tone wobbles with the hop/period phase; the mean must match
        let mean_rms = back[2..18].iter().map(|f| f.rms).sum::<f64>() / 16.0;
        assert!((mean_rms - 0.08).abs() < 0.0016, "mean rms {mean_rms}");
        for f in &back[2..18] {
            assert!((f.f0 - 180.0).abs() < 2.0, "f0 {}", f.f0);
            assert!((f.rms - 0.08).abs() < 0.006, "rms {}", f.rms);
            for (a, b) in f.band_shape.iter().zip(&shape) {
                assert!((a - b).abs() < 0.6, "shape {:?}", f.band_shape);
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = AnalysisConfig::default();
        let mut f = vec![0.0f32; cfg.feature_dim()];
        f[LOG_RMS] = (0.05f32).ln();
        let feats = vec![f; 5];
        assert_eq!(render(&feats, &cfg, 24000, 480), render(&feats, &cfg, 24000, 480));
    }
}
