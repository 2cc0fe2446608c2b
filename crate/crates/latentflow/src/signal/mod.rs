//! Waveforms, STFT analysis/synthesis, spectral losses and WAV I/O.
//!
//! Analysis places frame `t` at hop-grid position `t*hop` with a centered
//! window, so a length-N input always yields `ceil(N/hop)` frames.
//! Synthesis overlap-adds with the same window and divides by the window
//! power envelope, which reconstructs the input exactly wherever the
//! envelope is nonzero; the config constructor rejects window/hop pairs
//! whose envelope degenerates.

pub mod diff;
mod loss;
mod resample;
mod wav;

pub use loss::{lsd, lsd_with_config, multires_stft_loss, StftLossResolution, DEFAULT_RESOLUTIONS};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Canonical processing rate of the pipeline.
pub const CANONICAL_RATE: u32 = 8000;

/// Mono PCM audio carried through every distortion and enhancement op.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power, accumulated in f64.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            / self.samples.len() as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |acc, &v| acc.max(v.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Signal("sample rate must be positive".into()));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Signal("waveform contains non-finite samples".into()));
        }
        Ok(())
    }
}

/// STFT framing parameters with a periodic Hann window.
#[derive(Clone, Debug)]
pub struct SpectrogramConfig {
    window_len: usize,
    hop: usize,
    fft_size: usize,
}

impl SpectrogramConfig {
    /// Validates `hop <= window_len <= fft_size` and that the window power
    /// envelope at this hop stays bounded away from zero (the overlap-add
    /// condition synthesis relies on).
    pub fn new(window_len: usize, hop: usize, fft_size: usize) -> Result<Self> {
        if hop == 0 || window_len == 0 {
            return Err(Error::Config("stft: window and hop must be positive".into()));
        }
        if hop > window_len || window_len > fft_size {
            return Err(Error::Config(format!(
                "stft: need hop <= window_len <= fft_size, got {hop}/{window_len}/{fft_size}"
            )));
        }
        let cfg = SpectrogramConfig {
            window_len,
            hop,
            fft_size,
        };
        // Probe the envelope over a few hops of interior plus both edges.
        let probe_len = window_len * 4;
        let frames = frame_count(probe_len, hop);
        let env = cfg.power_envelope(probe_len, frames);
        let max = env.iter().cloned().fold(0.0f64, f64::max);
        let min = env.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > max * 1e-8) {
            return Err(Error::Config(format!(
                "stft: window/hop {window_len}/{hop} violates the overlap-add condition"
            )));
        }
        Ok(cfg)
    }

    /// The paper-rate analysis config: 40 ms window, 20 ms hop at 8 kHz.
    pub fn speech_8k() -> Self {
        SpectrogramConfig::new(320, 160, 320).expect("valid by construction")
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    /// Number of frequency bins `fft_size/2 + 1`.
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        hann_periodic(self.window_len)
    }

    /// Analysis left pad so frame `t` is centered on `t*hop`.
    pub fn pad_left(&self) -> usize {
        (self.window_len - self.hop) / 2
    }

    /// Sum of squared windows hitting each output sample, used by synthesis.
    fn power_envelope(&self, out_len: usize, frames: usize) -> Vec<f64> {
        let w = self.window();
        let pad = self.pad_left();
        let mut env = vec![0.0f64; out_len];
        for t in 0..frames {
            let start = t as isize * self.hop as isize - pad as isize;
            for (j, &wv) in w.iter().enumerate() {
                let n = start + j as isize;
                if n >= 0 && (n as usize) < out_len {
                    env[n as usize] += wv * wv;
                }
            }
        }
        env
    }
}

/// Complex time-frequency representation: `freq_bins x frames` matrices.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub freq_bins: usize,
    pub frames: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(freq_bins: usize, frames: usize) -> Self {
        ComplexSpectrogram {
            real: vec![0.0; freq_bins * frames],
            imag: vec![0.0; freq_bins * frames],
            freq_bins,
            frames,
        }
    }

    pub fn at(&self, f: usize, t: usize) -> (f64, f64) {
        let idx = f * self.frames + t;
        (self.real[idx], self.imag[idx])
    }

    pub fn magnitude(&self, f: usize, t: usize) -> f64 {
        let (re, im) = self.at(f, t);
        (re * re + im * im).sqrt()
    }
}

pub(crate) fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos()))
        .collect()
}

/// Frame count under the centered-frame rule: `ceil(n / hop)`.
pub fn frame_count(n: usize, hop: usize) -> usize {
    n.div_ceil(hop)
}

/// Short-time Fourier transform with centered frames.
pub fn stft(x: &Waveform, cfg: &SpectrogramConfig) -> Result<ComplexSpectrogram> {
    if x.is_empty() {
        return Err(Error::Signal("stft: empty input".into()));
    }
    let n = x.len();
    let frames = frame_count(n, cfg.hop());
    let fft_size = cfg.fft_size();
    let bins = cfg.freq_bins();
    let window = cfg.window();
    let pad = cfg.pad_left() as isize;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut out = ComplexSpectrogram::zeros(bins, frames);
    let mut buf = vec![Complex::new(0.0f64, 0.0f64); fft_size];

    for t in 0..frames {
        let start = t as isize * cfg.hop() as isize - pad;
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for (j, &wv) in window.iter().enumerate() {
            let idx = start + j as isize;
            if idx >= 0 && (idx as usize) < n {
                buf[j] = Complex::new(x.samples[idx as usize] as f64 * wv, 0.0);
            }
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out.real[f * frames + t] = buf[f].re;
            out.imag[f * frames + t] = buf[f].im;
        }
    }
    Ok(out)
}

/// Inverse STFT via windowed overlap-add with power-envelope normalization.
///
/// `istft(stft(x), cfg, x.len())` reconstructs `x` up to floating-point
/// rounding for any config accepted by [`SpectrogramConfig::new`].
pub fn istft(s: &ComplexSpectrogram, cfg: &SpectrogramConfig, out_len: usize) -> Result<Waveform> {
    istft_with_rate(s, cfg, out_len, CANONICAL_RATE)
}

pub fn istft_with_rate(
    s: &ComplexSpectrogram,
    cfg: &SpectrogramConfig,
    out_len: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    if s.freq_bins != cfg.freq_bins() {
        return Err(Error::Signal(format!(
            "istft: spectrogram has {} bins, config expects {}",
            s.freq_bins,
            cfg.freq_bins()
        )));
    }
    if out_len > s.frames * cfg.hop() {
        return Err(Error::Signal(format!(
            "istft: {} frames cover at most {} samples, requested {}",
            s.frames,
            s.frames * cfg.hop(),
            out_len
        )));
    }
    let fft_size = cfg.fft_size();
    let bins = cfg.freq_bins();
    let window = cfg.window();
    let pad = cfg.pad_left() as isize;

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(fft_size);
    let mut acc = vec![0.0f64; out_len];
    let mut buf = vec![Complex::new(0.0f64, 0.0f64); fft_size];

    for t in 0..s.frames {
        fill_hermitian(&mut buf, s, t, bins, fft_size);
        ifft.process(&mut buf);
        let start = t as isize * cfg.hop() as isize - pad;
        for (j, &wv) in window.iter().enumerate() {
            let idx = start + j as isize;
            if idx >= 0 && (idx as usize) < out_len {
                acc[idx as usize] += buf[j].re / fft_size as f64 * wv;
            }
        }
    }
    let env = cfg.power_envelope(out_len, s.frames);
    let samples = acc
        .iter()
        .zip(&env)
        .map(|(&a, &e)| if e > 0.0 { (a / e) as f32 } else { 0.0 })
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

/// Build a full Hermitian spectrum from one-sided bins for frame `t`.
/// DC and Nyquist imaginary parts are discarded.
fn fill_hermitian(
    buf: &mut [Complex<f64>],
    s: &ComplexSpectrogram,
    t: usize,
    bins: usize,
    fft_size: usize,
) {
    buf[0] = Complex::new(s.real[t], 0.0);
    for f in 1..bins - 1 {
        let re = s.real[f * s.frames + t];
        let im = s.imag[f * s.frames + t];
        buf[f] = Complex::new(re, im);
        buf[fft_size - f] = Complex::new(re, -im);
    }
    if fft_size % 2 == 0 {
        buf[bins - 1] = Complex::new(s.real[(bins - 1) * s.frames + t], 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = RngState::new(seed, 0);
        Waveform::new(
            (0..len).map(|_| rng.normal_f64() as f32 * 0.3).collect(),
            8000,
        )
    }

    #[test]
    fn frame_count_matches_hop_rule() {
        // 8 kHz, 40 ms window (320), 20 ms hop (160), N = 1600 -> 10 frames.
        let cfg = SpectrogramConfig::speech_8k();
        let x = noise(1600, 1);
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.frames, 10);
        assert_eq!(s.freq_bins, 161);
    }

    #[test]
    fn zero_input_zero_spectrogram() {
        let cfg = SpectrogramConfig::speech_8k();
        let x = Waveform::zeros(800, 8000);
        let s = stft(&x, &cfg).unwrap();
        assert!(s.real.iter().chain(&s.imag).all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_rejected() {
        let cfg = SpectrogramConfig::speech_8k();
        let x = Waveform::new(vec![], 8000);
        assert!(stft(&x, &cfg).is_err());
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = SpectrogramConfig::speech_8k();
        let rate = 8000f64;
        let x = Waveform::new(
            (0..1600)
                .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate).sin() as f32)
                .collect(),
            8000,
        );
        let s = stft(&x, &cfg).unwrap();
        // 1 kHz at fft 320 / 8 kHz -> bin 40.
        for t in 1..s.frames - 1 {
            let mut best = 0;
            let mut best_mag = 0.0;
            for f in 0..s.freq_bins {
                let m = s.magnitude(f, t);
                if m > best_mag {
                    best_mag = m;
                    best = f;
                }
            }
            assert_eq!(best, 40, "frame {t}");
        }
    }

    #[test]
    fn single_frame_dft_matches_naive_oracle() {
        let cfg = SpectrogramConfig::speech_8k();
        let x = noise(1600, 7);
        let s = stft(&x, &cfg).unwrap();
        // Naive windowed DFT of frame 2.
        let w = cfg.window();
        let pad = cfg.pad_left();
        let t = 2usize;
        let start = t * cfg.hop() - pad;
        for f in [0usize, 13, 40, 160] {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for j in 0..cfg.window_len() {
                let v = x.samples[start + j] as f64 * w[j];
                let ang = -2.0 * std::f64::consts::PI * f as f64 * j as f64 / cfg.fft_size() as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let (sre, sim) = s.at(f, t);
            assert!((sre - re).abs() < 1e-9, "re bin {f}");
            assert!((sim - im).abs() < 1e-9, "im bin {f}");
        }
    }

    #[test]
    fn roundtrip_white_noise() {
        let cfg = SpectrogramConfig::speech_8k();
        let x = noise(8000, 3);
        let s = stft(&x, &cfg).unwrap();
        let y = istft(&s, &cfg, x.len()).unwrap();
        let num: f64 = x
            .samples
            .iter()
            .zip(&y.samples)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = x.samples.iter().map(|&a| (a as f64).powi(2)).sum();
        assert!((num / den).sqrt() < 1e-6, "rel err {}", (num / den).sqrt());
    }

    #[test]
    fn roundtrip_chirp_and_odd_length() {
        let cfg = SpectrogramConfig::speech_8k();
        let rate = 8000f64;
        let x = Waveform::new(
            (0..6407)
                .map(|i| {
                    let t = i as f64 / rate;
                    let f0 = 150.0 + 1400.0 * t;
                    (2.0 * std::f64::consts::PI * f0 * t).sin() as f32 * 0.8
                })
                .collect(),
            8000,
        );
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.frames, frame_count(6407, 160));
        let y = istft(&s, &cfg, x.len()).unwrap();
        let num: f64 = x
            .samples
            .iter()
            .zip(&y.samples)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = x.samples.iter().map(|&a| (a as f64).powi(2)).sum();
        assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn zero_spectrogram_gives_zero_waveform() {
        let cfg = SpectrogramConfig::speech_8k();
        let s = ComplexSpectrogram::zeros(cfg.freq_bins(), 5);
        let y = istft(&s, &cfg, 700).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
        assert_eq!(y.len(), 700);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SpectrogramConfig::new(320, 400, 320).is_err()); // hop > win
        assert!(SpectrogramConfig::new(512, 160, 320).is_err()); // win > fft
        assert!(SpectrogramConfig::new(0, 0, 0).is_err());
    }
}

/// Shared FFT planner wrapper so hot paths reuse plans.
pub(crate) struct FftPair {
    pub forward: Arc<dyn rustfft::Fft<f64>>,
    pub inverse: Arc<dyn rustfft::Fft<f64>>,

}

impl FftPair {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        FftPair {
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),

        }
    }
}
