//! Multi-resolution spectral loss and log-spectral distance.

use super::{stft, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};

/// One analysis resolution of the multi-resolution loss.
#[derive(Clone, Copy, Debug)]
pub struct StftLossResolution {
    pub window_len: usize,
    pub hop: usize,
}

/// Window lengths [1280, 640, 320, 160, 80, 40, 20] paired index-wise with
/// hop sizes [320, 160, 80, 40, 20, 10, 5].
pub const DEFAULT_RESOLUTIONS: [StftLossResolution; 7] = [
    StftLossResolution { window_len: 1280, hop: 320 },
    StftLossResolution { window_len: 640, hop: 160 },
    StftLossResolution { window_len: 320, hop: 80 },
    StftLossResolution { window_len: 160, hop: 40 },
    StftLossResolution { window_len: 80, hop: 20 },
    StftLossResolution { window_len: 40, hop: 10 },
    StftLossResolution { window_len: 20, hop: 5 },
];

/// Magnitude floor applied before the log-magnitude term.
pub(crate) const LOG_MAG_FLOOR: f64 = 1e-7;

/// Mean over resolutions of spectral convergence plus log-magnitude L1.
///
/// Zero exactly when the magnitude spectra agree at every resolution, so it
/// is invariant to sign flips of either argument.
pub fn multires_stft_loss(
    x: &Waveform,
    y: &Waveform,
    resolutions: &[StftLossResolution],
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Signal(format!(
            "multires_stft_loss: lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if resolutions.is_empty() {
        return Err(Error::Contract("multires_stft_loss: no resolutions".into()));
    }
    let mut total = 0.0f64;
    for res in resolutions {
        let cfg = SpectrogramConfig::new(res.window_len, res.hop, res.window_len)?;
        let sx = stft(x, &cfg)?;
        let sy = stft(y, &cfg)?;
        let n = sx.real.len();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut logmag = 0.0f64;
        for i in 0..n {
            let mx = (sx.real[i] * sx.real[i] + sx.imag[i] * sx.imag[i]).sqrt();
            let my = (sy.real[i] * sy.real[i] + sy.imag[i] * sy.imag[i]).sqrt();
            num += (mx - my) * (mx - my);
            den += mx * mx;
            logmag += (mx.max(LOG_MAG_FLOOR).ln() - my.max(LOG_MAG_FLOOR).ln()).abs();
        }
        let sc = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
        total += sc + logmag / n as f64;
    }
    Ok(total / resolutions.len() as f64)
}

/// Magnitude floor for log-spectral distance: -80 dB.
const LSD_FLOOR_DB: f64 = -80.0;

/// Log-spectral distance in dB with the default analysis setting
/// (fft 512, hop 160 at 8 kHz). Inputs are trimmed to the shorter length.
pub fn lsd(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let cfg = SpectrogramConfig::new(512, 160, 512)?;
    lsd_with_config(reference, estimate, &cfg)
}

/// Log-spectral distance: RMS over frames of the per-frame RMS difference
/// of 20*log10 magnitudes, floored at -80 dB. Symmetric in its arguments
/// and invariant to common scaling of both.
pub fn lsd_with_config(
    reference: &Waveform,
    estimate: &Waveform,
    cfg: &SpectrogramConfig,
) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    if n == 0 {
        return Err(Error::Signal("lsd: empty overlap".into()));
    }
    let r = Waveform::new(reference.samples[..n].to_vec(), reference.sample_rate);
    let e = Waveform::new(estimate.samples[..n].to_vec(), estimate.sample_rate);
    let sr = stft(&r, cfg)?;
    let se = stft(&e, cfg)?;
    let floor = 10f64.powf(LSD_FLOOR_DB / 20.0);
    let mut frame_sq = 0.0f64;
    for t in 0..sr.frames {
        let mut acc = 0.0f64;
        for f in 0..sr.freq_bins {
            let mr = sr.magnitude(f, t).max(floor);
            let me = se.magnitude(f, t).max(floor);
            let d = 20.0 * (mr.log10() - me.log10());
            acc += d * d;
        }
        frame_sq += acc / sr.freq_bins as f64;
    }
    Ok((frame_sq / sr.frames as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn noise(len: usize, seed: u64, scale: f32) -> Waveform {
        let mut rng = RngState::new(seed, 0);
        Waveform::new(
            (0..len).map(|_| rng.normal_f64() as f32 * scale).collect(),
            8000,
        )
    }

    #[test]
    fn loss_zero_for_identical() {
        let x = noise(4000, 2, 0.5);
        let l = multires_stft_loss(&x, &x, &DEFAULT_RESOLUTIONS).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_sign_invariant() {
        let x = noise(4000, 3, 0.5);
        let y = Waveform::new(x.samples.iter().map(|&v| -v).collect(), 8000);
        let l = multires_stft_loss(&x, &y, &DEFAULT_RESOLUTIONS).unwrap();
        assert!(l < 1e-12, "loss {l}");
    }

    #[test]
    fn loss_half_scale_matches_hand_value() {
        // For y = 0.5 x: spectral convergence = 0.5 exactly and the
        // log-magnitude term = ln 2 at every resolution (all bins above
        // the floor for broadband noise), so the mean equals their sum.
        let x = noise(4000, 4, 0.5);
        let y = Waveform::new(x.samples.iter().map(|&v| 0.5 * v).collect(), 8000);
        let one = [StftLossResolution {
            window_len: 320,
            hop: 80,
        }];
        let l = multires_stft_loss(&x, &y, &one).unwrap();
        let expect = 0.5 + std::f64::consts::LN_2;
        assert!((l - expect).abs() < 1e-9, "loss {l} expect {expect}");
    }

    #[test]
    fn loss_length_mismatch_rejected() {
        let x = noise(1000, 5, 0.5);
        let y = noise(1001, 5, 0.5);
        assert!(multires_stft_loss(&x, &y, &DEFAULT_RESOLUTIONS).is_err());
    }

    #[test]
    fn loss_nonnegative() {
        let x = noise(3000, 6, 0.4);
        let y = noise(3000, 7, 0.4);
        let l = multires_stft_loss(&x, &y, &DEFAULT_RESOLUTIONS).unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn lsd_zero_for_identical() {
        let x = noise(4000, 8, 0.5);
        assert_eq!(lsd(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn lsd_constant_offset_is_20db() {
        let x = noise(4000, 9, 0.1);
        let y = Waveform::new(x.samples.iter().map(|&v| 10.0 * v).collect(), 8000);
        let l = lsd(&x, &y).unwrap();
        assert!((l - 20.0).abs() < 1e-9, "lsd {l}");
    }

    #[test]
    fn lsd_matches_double_loop_oracle() {
        let x = noise(2000, 10, 0.3);
        let y = noise(2000, 11, 0.3);
        let cfg = SpectrogramConfig::new(512, 160, 512).unwrap();
        let l = lsd_with_config(&x, &y, &cfg).unwrap();

        // Direct per-frame loop over the raw spectrograms.
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        let floor = 1e-4f64;
        let mut total = 0.0;
        for t in 0..sx.frames {
            let mut acc = 0.0;
            for f in 0..sx.freq_bins {
                let a = 20.0 * sx.magnitude(f, t).max(floor).log10();
                let b = 20.0 * sy.magnitude(f, t).max(floor).log10();
                acc += (a - b) * (a - b);
            }
            total += acc / sx.freq_bins as f64;
        }
        let oracle = (total / sx.frames as f64).sqrt();
        assert!((l - oracle).abs() < 1e-9);
    }

    #[test]
    fn lsd_silent_pair_is_zero() {
        let x = Waveform::zeros(2000, 8000);
        let y = Waveform::zeros(2000, 8000);
        assert_eq!(lsd(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn lsd_symmetric_and_scale_invariant() {
        let x = noise(2500, 12, 0.2);
        let y = noise(2500, 13, 0.2);
        let ab = lsd(&x, &y).unwrap();
        let ba = lsd(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let xs = Waveform::new(x.samples.iter().map(|&v| 0.25 * v).collect(), 8000);
        let ys = Waveform::new(y.samples.iter().map(|&v| 0.25 * v).collect(), 8000);
        let scaled = lsd(&xs, &ys).unwrap();
        assert!((ab - scaled).abs() < 1e-6, "{ab} vs {scaled}");
    }
}
