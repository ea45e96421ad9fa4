use rand::Rng;

use super::labels::{Volume, VolumeBands};
use crate::audio::rms;
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 16;

/// Rescales `waveform` so its RMS lands uniformly inside the band of
/// `target`. Scales that would push any sample beyond full scale are
/// rejected and redrawn from the lower half of the band.
pub fn rescale_volume_augment<R: Rng + ?Sized>(
    waveform: &[f32],
    target: Volume,
    bands: &VolumeBands,
    rng: &mut R,
) -> Result<(Vec<f32>, f64)> {
    let current = rms(waveform);
    if current <= 1e-6 {
        return Err(Error::invalid(format!("cannot rescale a silent waveform (rms {current:.2e})")));
    }
    let peak = waveform.iter().fold(0.0f64, |m, &x| m.max(x.abs() as f64));
    let [lo, hi] = bands.band(target);
    let mut upper = hi;
    for _ in 0..MAX_ATTEMPTS {
        let target_rms = rng.random_range(lo..=upper);
        let scale = target_rms / current;
        if peak * scale <= 1.0 {
            let out: Vec<f32> = waveform.iter().map(|&x| (x as f64 * scale) as f32).collect();
            let new_rms = rms(&out);
            return Ok((out, new_rms));
        }
        upper = lo + 0.5 * (upper - lo);
    }
    Err(Error::invalid(format!(
        "waveform crest factor {:.1} is too high to reach the {} volume band without clipping",
        peak / current,
        target.name()
    )))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tone(amp: f32, n: usize) -> Vec<f32> {
        (0..n).map(|i| amp * (i as f32 * 0.05).sin()).collect()
    }

    #[test]
    fn lands_in_target_band() {
        let bands = VolumeBands::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tone(0.3, 4800);
        for target in Volume::ALL {
            for _ in 0..50 {
                let (_, r) = rescale_volume_augment(&x, target, &bands, &mut rng).unwrap();
                let [lo, hi] = bands.band(target);
                assert!(r >= lo - 1e-6 && r <= hi + 1e-6, "{target:?} {r}");
            }
        }
    }

    #[test]
    fn multiplicative_rms_identity() {
        let x = tone(0.1 * std::f32::consts::SQRT_2, 48000);
        let base = rms(&x);
        assert!((base - 0.1).abs() < 1e-3);
        let scaled: Vec<f32> = x.iter().map(|v| v * 0.3).collect();
        assert!((rms(&scaled) - 0.3 * base).abs() < 1e-6);
    }

    #[test]
    fn silent_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = rescale_volume_augment(&[0.0; 100], Volume::Low, &VolumeBands::default(), &mut rng);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn clipping_guard_uses_lower_half() {
        // Crest factor 10: any rms above 0.1 would clip.
        let mut x = vec![0.0f32; 100];
        x[0] = 1.0;
        let bands = VolumeBands { high: [0.05, 0.2], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (out, r) = rescale_volume_augment(&x, Volume::High, &bands, &mut rng).unwrap();
            assert!(out.iter().all(|v| v.abs() <= 1.0));
            assert!(r >= 0.05 && r <= 0.1 + 1e-9);
        }
    }
}
