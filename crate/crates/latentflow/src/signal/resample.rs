//! Polyphase sample-rate conversion with a windowed-sinc kernel.

use super::Waveform;
use crate::error::{Error, Result};

/// Kernel half-width in samples of the lower rate.
const HALF_WIDTH: usize = 24;

/// Rational resampling to `target_rate` via a Hann-windowed sinc kernel.
/// The kernel is renormalized per output sample, so DC is preserved
/// exactly and edges avoid droop.
pub fn resample(x: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Signal("resample: target rate must be positive".into()));
    }
    if x.sample_rate == target_rate {
        return Ok(x.clone());
    }
    if x.is_empty() {
        return Ok(Waveform::new(vec![], target_rate));
    }
    let from = x.sample_rate as f64;
    let to = target_rate as f64;
    let ratio = to / from; // output samples per input sample
    let out_len = (x.len() as f64 * ratio).round() as usize;
    let cutoff = 0.92 * ratio.min(1.0); // normalized to input Nyquist
    // Width measured in input samples; stretch when downsampling.
    let half = (HALF_WIDTH as f64 / ratio.min(1.0)).ceil() as isize;

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let base = center.floor() as isize;
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for i in (base - half)..=(base + half) {
            let u = center - i as f64;
            let w = hann_arg(u / half as f64);
            if w == 0.0 {
                continue;
            }
            let k = cutoff * sinc(cutoff * u) * w;
            norm += k;
            if i >= 0 && (i as usize) < x.len() {
                acc += x.samples[i as usize] as f64 * k;
            }
        }
        out.push(if norm.abs() > 1e-12 {
            (acc / norm) as f32
        } else {
            0.0
        });
    }
    Ok(Waveform::new(out, target_rate))
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let p = std::f64::consts::PI * u;
        p.sin() / p
    }
}

/// Hann taper on [-1, 1].
fn hann_arg(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}
