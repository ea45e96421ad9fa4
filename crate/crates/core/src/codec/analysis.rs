//! Frame-level analysis: RMS, YIN pitch tracking and a mel-band spectral
//! envelope.

use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Index layout of an analysis frame.
pub const VOICING: usize = 0;
pub const LOG_F0: usize = 1;
pub const LOG_RMS: usize = 2;
pub const BANDS: usize = 3;

/// Reference pitch for the log-F0 feature.
pub const F0_REF_HZ: f64 = 230.0;
const RMS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub window: usize,
    pub n_bands: usize,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// First CMND dip below this is taken as the period.
    pub yin_threshold: f64,
    /// Without such a dip, the global CMND minimum still counts as voiced
    /// when it is below this. Keeps note transitions voiced.
    pub voicing_threshold: f64,
    /// Frames quieter than this absolute RMS are unvoiced.
    pub silence_rms: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window: 1024,
            n_bands: 8,
            band_lo_hz: 250.0,
            band_hi_hz: 8000.0,
            f0_min_hz: 70.0,
            f0_max_hz: 600.0,
            yin_threshold: 0.15,
            voicing_threshold: 0.35,
            silence_rms: 1e-3,
        }
    }
}

impl AnalysisConfig {
    pub fn feature_dim(&self) -> usize {
        BANDS + self.n_bands
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz, equally spaced on the mel scale.
pub fn band_edges(cfg: &AnalysisConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.band_lo_hz);
    let hi = hz_to_mel(cfg.band_hi_hz);
    (0..=cfg.n_bands)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / cfg.n_bands as f64))
        .collect()
}

/// Band centres on the mel scale.
pub fn band_centres_mel(cfg: &AnalysisConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.band_lo_hz);
    let hi = hz_to_mel(cfg.band_hi_hz);
    let step = (hi - lo) / cfg.n_bands as f64;
    (0..cfg.n_bands).map(|i| lo + step * (i as f64 + 0.5)).collect()
}

pub fn rms_to_feature(rms: f64) -> f64 {
    (rms + RMS_FLOOR).ln()
}

pub fn feature_to_rms(v: f64) -> f64 {
    (v.exp() - RMS_FLOOR).max(0.0)
}

/// One frame of analysis output.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnalysis {
    pub f0: f64,
    pub rms: f64,
    pub band_shape: Vec<f64>,
}

impl FrameAnalysis {
    pub fn to_features(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(BANDS + self.band_shape.len());
        v.push(if self.f0 > 0.0 { 1.0 } else { 0.0 });
        v.push(if self.f0 > 0.0 { (self.f0 / F0_REF_HZ).log2() as f32 } else { 0.0 });
        v.push(rms_to_feature(self.rms) as f32);
        v.extend(self.band_shape.iter().map(|&b| b as f32));
        v
    }
}

/// Reusable analyzer holding FFT plans.
pub struct Analyzer {
    cfg: AnalysisConfig,
    sample_rate: u32,
    hop: usize,
    spec_fft: Arc<dyn Fft<f32>>,
    corr_fft: Arc<dyn Fft<f32>>,
    corr_ifft: Arc<dyn Fft<f32>>,
    hann: Vec<f32>,
    band_bins: Vec<(usize, usize)>,
}

impl Analyzer {
    pub fn new(cfg: AnalysisConfig, sample_rate: u32, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        let n = cfg.window;
        let spec_fft = planner.plan_fft_forward(n);
        let corr_fft = planner.plan_fft_forward(2 * n);
        let corr_ifft = planner.plan_fft_inverse(2 * n);
        let hann = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let bin_hz = sample_rate as f64 / n as f64;
        let edges = band_edges(&cfg);
        let band_bins = edges
            .windows(2)
            .map(|e| {
                let lo = (e[0] / bin_hz).ceil() as usize;
                let hi = ((e[1] / bin_hz).floor() as usize).max(lo + 1);
                (lo, hi.min(n / 2))
            })
            .collect();
        Self {
            cfg,
            sample_rate,
            hop,
            spec_fft,
            corr_fft,
            corr_ifft,
            hann,
            band_bins,
        }
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.cfg
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    /// Window of `cfg.window` samples centred on frame `t`, zero padded.
    fn window_at(&self, x: &[f32], t: usize) -> Vec<f32> {
        let n = self.cfg.window;
        let centre = (t * self.hop + self.hop / 2) as i64;
        let start = centre - (n / 2) as i64;
        (0..n as i64)
            .map(|i| {
                let j = start + i;
                if j >= 0 && (j as usize) < x.len() {
                    x[j as usize]
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn hop_rms(&self, x: &[f32], t: usize) -> f64 {
        let lo = t * self.hop;
        let hi = ((t + 1) * self.hop).min(x.len());
        if lo >= hi {
            return 0.0;
        }
        let sum: f64 = x[lo..hi].iter().map(|&v| (v as f64) * (v as f64)).sum();
        (sum / self.hop as f64).sqrt()
    }

    fn band_shape(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex32> = frame
            .iter()
            .zip(&self.hann)
            .map(|(&x, &w)| Complex32::new(x * w, 0.0))
            .collect();
        self.spec_fft.process(&mut buf);
        let log_e: Vec<f64> = self
            .band_bins
            .iter()
            .map(|&(lo, hi)| {
                let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr() as f64).sum();
                (p / (hi - lo) as f64 + 1e-10).ln()
            })
            .collect();
        let mean = log_e.iter().sum::<f64>() / log_e.len() as f64;
        log_e.iter().map(|v| v - mean).collect()
    }

    /// YIN on the centred window. A window straddling a note change often
    /// looks aperiodic, so the parts of it inside the frame's own hop and
    /// either neighbour get a second try.
    fn frame_f0(&self, w: &[f32]) -> f64 {
        let n = w.len();
        let (start, end) = (n / 2 - self.hop / 2, n / 2 + self.hop / 2);
        [&w[..], &w[start..], &w[..end]]
            .into_iter()
            .map(|part| self.yin(part))
            .find(|&f0| f0 > 0.0)
            .unwrap_or(0.0)
    }

    /// YIN pitch estimate of one window (at most `cfg.window` long), or 0
    /// when aperiodic.
    fn yin(&self, frame: &[f32]) -> f64 {
        let n = frame.len();
        let sr = self.sample_rate as f64;
        let min_lag = (sr / self.cfg.f0_max_hz).floor() as usize;
        let max_lag = ((sr / self.cfg.f0_min_hz).ceil() as usize).min(n / 2);
        let integ = n - max_lag;

        // cross-correlation r(tau) = sum_{j < integ} x_j x_{j+tau} via FFT
        let m = 2 * self.cfg.window;
        let mut a: Vec<Complex32> = (0..m)
            .map(|i| Complex32::new(if i < integ { frame[i] } else { 0.0 }, 0.0))
            .collect();
        let mut b: Vec<Complex32> = (0..m)
            .map(|i| Complex32::new(if i < n { frame[i] } else { 0.0 }, 0.0))
            .collect();
        self.corr_fft.process(&mut a);
        self.corr_fft.process(&mut b);
        let mut c: Vec<Complex32> = a.iter().zip(&b).map(|(x, y)| x.conj() * y).collect();
        self.corr_ifft.process(&mut c);
        let scale = 1.0 / m as f64;

        let mut prefix = vec![0.0f64; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + (frame[i] as f64).powi(2);
        }
        let energy = |start: usize| prefix[start + integ] - prefix[start];
        let e0 = energy(0);
        if e0 <= 1e-12 {
            return 0.0;
        }
        let mut d = vec![0.0f64; max_lag + 1];
        for (tau, slot) in d.iter_mut().enumerate().skip(1) {
            *slot = (e0 + energy(tau) - 2.0 * c[tau].re as f64 * scale).max(0.0);
        }
        let mut cmnd = vec![1.0f64; max_lag + 1];
        let mut running = 0.0;
        for tau in 1..=max_lag {
            running += d[tau];
            cmnd[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
        }
        let lo = min_lag.max(2);
        let mut tau = lo;
        while tau < max_lag && cmnd[tau] >= self.cfg.yin_threshold {
            tau += 1;
        }
        if tau < max_lag {
            while tau + 1 < max_lag && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
        } else {
            tau = (lo..max_lag).min_by(|&a, &b| cmnd[a].total_cmp(&cmnd[b])).unwrap_or(lo);
            if cmnd[tau] >= self.cfg.voicing_threshold {
                return 0.0;
            }
        }
        let (y0, y1, y2) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
        let denom = y0 - 2.0 * y1 + y2;
        let shift = if denom.abs() > 1e-12 { 0.5 * (y0 - y2) / denom } else { 0.0 };
        sr / (tau as f64 + shift.clamp(-1.0, 1.0))
    }

    pub fn analyze(&self, x: &[f32]) -> Vec<FrameAnalysis> {
        let frames = self.frame_count(x.len());
        let rms: Vec<f64> = (0..frames).map(|t| self.hop_rms(x, t)).collect();
        let mut sorted = rms.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let loud = sorted.get(sorted.len() * 9 / 10).copied().unwrap_or(0.0);
        let gate = self.cfg.silence_rms.max(0.15 * loud);
        (0..frames)
            .map(|t| {
                let w = self.window_at(x, t);
                let f0 = if rms[t] >= gate { self.frame_f0(&w) } else { 0.0 };
                FrameAnalysis {
                    f0,
                    rms: rms[t],
                    band_shape: self.band_shape(&w),
                }
            })
            .collect()
    }

    /// Per-frame F0 contour (0 = unvoiced).
    pub fn f0_track(&self, x: &[f32]) -> Vec<f64> {
        self.analyze(x).into_iter().map(|f| f.f0).collect()
    }

    pub fn features(&self, x: &[f32]) -> Vec<Vec<f32>> {
        self.analyze(x).iter().map(FrameAnalysis::to_features).collect()
    }
}
