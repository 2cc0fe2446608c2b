//! Differentiable STFT/iSTFT primitives and the in-graph spectral loss.
//!
//! Both transforms are linear maps, so each is recorded as a single graph
//! node whose backward applies the adjoint via FFTs rather than unrolling
//! thousands of elementwise ops. Spectrograms travel as one `(2F, T)`
//! tensor: rows `0..F` hold the real part, rows `F..2F` the imaginary
//! part.

use rustfft::num_complex::Complex;

use super::loss::{StftLossResolution, LOG_MAG_FLOOR};
use super::{stft, FftPair, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorBase};

/// Differentiable STFT of a 1-D signal tensor, output shape `(2F, T)`.
pub fn stft_tensor<E: Scalar>(
    x: &TensorBase<E>,
    cfg: &SpectrogramConfig,
) -> Result<TensorBase<E>> {
    if x.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "stft_tensor: expected 1-D input, got {:?}",
            x.shape()
        )));
    }
    let n = x.numel();
    if n == 0 {
        return Err(Error::Signal("stft_tensor: empty input".into()));
    }
    let frames = super::frame_count(n, cfg.hop());
    let fft_size = cfg.fft_size();
    let bins = cfg.freq_bins();
    let window = cfg.window();
    let pad = cfg.pad_left() as isize;
    let hop = cfg.hop() as isize;

    let fft = FftPair::new(fft_size);
    let mut out = vec![E::zero(); 2 * bins * frames];
    {
        let xv = x.data();
        let mut buf = vec![Complex::new(0.0f64, 0.0f64); fft_size];
        for t in 0..frames {
            let start = t as isize * hop - pad;
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            for (j, &wv) in window.iter().enumerate() {
                let idx = start + j as isize;
                if idx >= 0 && (idx as usize) < n {
                    buf[j] = Complex::new(Scalar::to_f64(xv[idx as usize]) * wv, 0.0);
                }
            }
            fft.forward.process(&mut buf);
            for f in 0..bins {
                out[f * frames + t] = E::from_f64(buf[f].re);
                out[(bins + f) * frames + t] = E::from_f64(buf[f].im);
            }
        }
    }

    let back: Option<crate::tensor::BackwardFn<E>> = if x.requires_grad() {
        let xt = x.clone();
        let window = window.clone();
        Some(Box::new(move |g, sink| {
            let fft = FftPair::new(fft_size);
            let mut dx = vec![E::zero(); n];
            let mut buf = vec![Complex::new(0.0f64, 0.0f64); fft_size];
            for t in 0..frames {
                for v in buf.iter_mut() {
                    *v = Complex::new(0.0, 0.0);
                }
                for f in 0..bins {
                    buf[f] = Complex::new(
                        Scalar::to_f64(g[f * frames + t]),
                        Scalar::to_f64(g[(bins + f) * frames + t]),
                    );
                }
                // Adjoint of the one-sided DFT rows: unnormalized inverse
                // transform, real part.
                fft.inverse.process(&mut buf);
                let start = t as isize * hop - pad;
                for (j, &wv) in window.iter().enumerate() {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < n {
                        let i = idx as usize;
                        dx[i] += E::from_f64(buf[j].re * wv);
                    }
                }
            }
            sink.add_to(&xt, &dx);
        }))
    } else {
        None
    };
    Ok(TensorBase::from_op(
        out,
        vec![2 * bins, frames],
        vec![x.clone()],
        back,
    ))
}

/// Differentiable inverse STFT of a `(2F, T)` tensor to `out_len` samples.
/// Imaginary parts at DC and Nyquist are ignored (their gradient is zero).
pub fn istft_tensor<E: Scalar>(
    s: &TensorBase<E>,
    cfg: &SpectrogramConfig,
    out_len: usize,
) -> Result<TensorBase<E>> {
    let bins = cfg.freq_bins();
    let shape = s.shape().to_vec();
    if shape.len() != 2 || shape[0] != 2 * bins {
        return Err(Error::Shape(format!(
            "istft_tensor: expected (2F, T) = ({}, _), got {:?}",
            2 * bins,
            shape
        )));
    }
    let frames = shape[1];
    if out_len == 0 || out_len > frames * cfg.hop() {
        return Err(Error::Signal(format!(
            "istft_tensor: out_len {} not coverable by {} frames",
            out_len, frames
        )));
    }
    let fft_size = cfg.fft_size();
    let window = cfg.window();
    let pad = cfg.pad_left() as isize;
    let hop = cfg.hop() as isize;
    let env = envelope_for(cfg, out_len, frames);

    let fft = FftPair::new(fft_size);
    let mut acc = vec![0.0f64; out_len];
    {
        let sv = s.data();
        let mut buf = vec![Complex::new(0.0f64, 0.0f64); fft_size];
        for t in 0..frames {
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            buf[0] = Complex::new(Scalar::to_f64(sv[t]), 0.0);
            for f in 1..bins - 1 {
                let re = Scalar::to_f64(sv[f * frames + t]);
                let im = Scalar::to_f64(sv[(bins + f) * frames + t]);
                buf[f] = Complex::new(re, im);
                buf[fft_size - f] = Complex::new(re, -im);
            }
            if fft_size % 2 == 0 {
                buf[bins - 1] = Complex::new(Scalar::to_f64(sv[(bins - 1) * frames + t]), 0.0);
            }
            fft.inverse.process(&mut buf);
            let start = t as isize * hop - pad;
            for (j, &wv) in window.iter().enumerate() {
                let idx = start + j as isize;
                if idx >= 0 && (idx as usize) < out_len {
                    acc[idx as usize] += buf[j].re / fft_size as f64 * wv;
                }
            }
        }
    }
    let out: Vec<E> = acc
        .iter()
        .zip(&env)
        .map(|(&a, &e)| E::from_f64(if e > 0.0 { a / e } else { 0.0 }))
        .collect();

    let back: Option<crate::tensor::BackwardFn<E>> = if s.requires_grad() {
        let st = s.clone();
        let window = window.clone();
        let env = env.clone();
        Some(Box::new(move |g, sink| {
            let fft = FftPair::new(fft_size);
            let nf = fft_size as f64;
            // Envelope division is per output sample.
            let gp: Vec<f64> = g
                .iter()
                .zip(&env)
                .map(|(&gv, &e)| {
                    if e > 0.0 {
                        Scalar::to_f64(gv) / e
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut ds = vec![E::zero(); 2 * bins * frames];
            let mut buf = vec![Complex::new(0.0f64, 0.0f64); fft_size];
            for t in 0..frames {
                let start = t as isize * hop - pad;
                for v in buf.iter_mut() {
                    *v = Complex::new(0.0, 0.0);
                }
                for (j, &wv) in window.iter().enumerate() {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < gp.len() {
                        buf[j] = Complex::new(gp[idx as usize] * wv, 0.0);
                    }
                }
                fft.forward.process(&mut buf);
                ds[t] = E::from_f64(buf[0].re / nf);
                for f in 1..bins - 1 {
                    ds[f * frames + t] = E::from_f64(2.0 * buf[f].re / nf);
                    ds[(bins + f) * frames + t] = E::from_f64(2.0 * buf[f].im / nf);
                }
                if fft_size % 2 == 0 {
                    ds[(bins - 1) * frames + t] = E::from_f64(buf[bins - 1].re / nf);
                }
            }
            sink.add_to(&st, &ds);
        }))
    } else {
        None
    };
    Ok(TensorBase::from_op(out, vec![out_len], vec![s.clone()], back))
}

fn envelope_for(cfg: &SpectrogramConfig, out_len: usize, frames: usize) -> Vec<f64> {
    let w = cfg.window();
    let pad = cfg.pad_left() as isize;
    let mut env = vec![0.0f64; out_len];
    for t in 0..frames {
        let start = t as isize * cfg.hop() as isize - pad;
        for (j, &wv) in w.iter().enumerate() {
            let n = start + j as isize;
            if n >= 0 && (n as usize) < out_len {
                env[n as usize] += wv * wv;
            }
        }
    }
    env
}

/// In-graph multi-resolution spectral loss of a signal tensor against a
/// fixed reference waveform. Matches [`super::multires_stft_loss`] up to
/// the smooth magnitude floor used for differentiability.
pub fn multires_stft_loss_tensor<E: Scalar>(
    reference: &Waveform,
    y: &TensorBase<E>,
    resolutions: &[StftLossResolution],
) -> Result<TensorBase<E>> {
    if y.shape().len() != 1 || y.numel() != reference.len() {
        return Err(Error::Shape(format!(
            "multires_stft_loss_tensor: signal shape {:?} vs reference length {}",
            y.shape(),
            reference.len()
        )));
    }
    if resolutions.is_empty() {
        return Err(Error::Contract("multires_stft_loss_tensor: no resolutions".into()));
    }
    // mag_eps matches the pure loss floor: sqrt(m^2 + floor^2) ~ max(m, floor).
    let mag_eps = E::from_f64(LOG_MAG_FLOOR * LOG_MAG_FLOOR);
    let mut total: Option<TensorBase<E>> = None;
    for res in resolutions {
        let cfg = SpectrogramConfig::new(res.window_len, res.hop, res.window_len)?;
        let bins = cfg.freq_bins();

        // Reference magnitudes are constants.
        let sx = stft(reference, &cfg)?;
        let frames = sx.frames;
        let mut mx = vec![E::zero(); bins * frames];
        let mut ln_mx = vec![E::zero(); bins * frames];
        let mut den = 0.0f64;
        for i in 0..bins * frames {
            let m = (sx.real[i] * sx.real[i] + sx.imag[i] * sx.imag[i]).sqrt();
            den += m * m;
            let floored = (m * m + LOG_MAG_FLOOR * LOG_MAG_FLOOR).sqrt();
            mx[i] = E::from_f64(m);
            ln_mx[i] = E::from_f64(floored.ln());
        }
        let mx = TensorBase::from_vec(mx, &[bins, frames])?;
        let ln_mx = TensorBase::from_vec(ln_mx, &[bins, frames])?;

        let sy = stft_tensor(y, &cfg)?;
        let re = sy.slice_rows(0, bins)?;
        let im = sy.slice_rows(bins, 2 * bins)?;
        let mag = re.mul(&re)?.add(&im.mul(&im)?)?.affine(E::one(), mag_eps).sqrt();

        let diff = mag.sub(&mx)?;
        let ssq = diff.mul(&diff)?.sum_all();
        let sc = if den > 0.0 {
            ssq.affine(E::one(), E::from_f64(1e-24))
                .sqrt()
                .scale(E::from_f64(1.0 / den.sqrt()))
        } else {
            TensorBase::scalar(E::zero())
        };
        let lm = mag.ln().sub(&ln_mx)?.abs().mean_all();
        let term = sc.add(&lm)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total
        .expect("at least one resolution")
        .scale(E::from_f64(1.0 / resolutions.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::signal::DEFAULT_RESOLUTIONS;
    use crate::tensor::RngState;

    #[test]
    fn stft_tensor_matches_pure_stft() {
        let cfg = SpectrogramConfig::speech_8k();
        let mut rng = RngState::new(2, 0);
        let samples: Vec<f32> = (0..1600).map(|_| rng.normal_f64() as f32 * 0.3).collect();
        let wave = Waveform::new(samples.clone(), 8000);
        let pure = stft(&wave, &cfg).unwrap();
        let xt = TensorBase::<f64>::from_vec(
            samples.iter().map(|&v| v as f64).collect(),
            &[1600],
        )
        .unwrap();
        let st = stft_tensor(&xt, &cfg).unwrap();
        let sv = st.to_vec();
        let bins = cfg.freq_bins();
        for f in 0..bins {
            for t in 0..pure.frames {
                let (re, im) = pure.at(f, t);
                assert!((sv[f * pure.frames + t] - re).abs() < 1e-9);
                assert!((sv[(bins + f) * pure.frames + t] - im).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tensor_roundtrip_reconstructs() {
        let cfg = SpectrogramConfig::speech_8k();
        let mut rng = RngState::new(4, 0);
        let xt = rng.normal_tensor::<f64>(&[1777]);
        let st = stft_tensor(&xt, &cfg).unwrap();
        let back = istft_tensor(&st, &cfg, 1777).unwrap();
        let a = xt.to_vec();
        let b = back.to_vec();
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = a.iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 1e-9);
    }

    #[test]
    fn stft_tensor_gradient_check() {
        let cfg = SpectrogramConfig::new(32, 16, 32).unwrap();
        let mut rng = RngState::new(5, 0);
        let x = TensorBase::<f64>::param("x", rng.normal_vec(100), &[100]).unwrap();
        let target = rng.normal_tensor::<f64>(&[2 * cfg.freq_bins(), 7]);
        let forward = || {
            let s = stft_tensor(&x, &cfg)?;
            s.sub(&target)?.mse(&target.scale(0.0))
        };
        let mut probe = RngState::new(6, 0);
        check_gradients(
            forward,
            &[x.clone()],
            GradCheckOptions {
                samples_per_tensor: 8,
                ..Default::default()
            },
            &mut probe,
        )
        .unwrap();
    }

    #[test]
    fn istft_tensor_gradient_check() {
        let cfg = SpectrogramConfig::new(32, 16, 32).unwrap();
        let bins = cfg.freq_bins();
        let mut rng = RngState::new(7, 0);
        let s = TensorBase::<f64>::param("s", rng.normal_vec(2 * bins * 6), &[2 * bins, 6])
            .unwrap();
        let target = rng.normal_tensor::<f64>(&[90]);
        let forward = || {
            let y = istft_tensor(&s, &cfg, 90)?;
            y.mse(&target)
        };
        let mut probe = RngState::new(8, 0);
        check_gradients(
            forward,
            &[s.clone()],
            GradCheckOptions {
                samples_per_tensor: 8,
                ..Default::default()
            },
            &mut probe,
        )
        .unwrap();
    }

    #[test]
    fn tensor_loss_agrees_with_pure_loss() {
        let mut rng = RngState::new(9, 0);
        let x = Waveform::new(
            (0..2000).map(|_| rng.normal_f64() as f32 * 0.4).collect(),
            8000,
        );
        let y: Vec<f32> = (0..2000).map(|_| rng.normal_f64() as f32 * 0.4).collect();
        let pure = crate::signal::multires_stft_loss(
            &x,
            &Waveform::new(y.clone(), 8000),
            &DEFAULT_RESOLUTIONS,
        )
        .unwrap();
        let yt = TensorBase::<f64>::from_vec(y.iter().map(|&v| v as f64).collect(), &[2000])
            .unwrap();
        let graph = multires_stft_loss_tensor(&x, &yt, &DEFAULT_RESOLUTIONS)
            .unwrap()
            .item()
            .unwrap();
        assert!(
            (pure - graph).abs() < 1e-4 * pure.max(1.0),
            "pure {pure} graph {graph}"
        );
    }

    #[test]
    fn tensor_loss_gradient_check() {
        let mut rng = RngState::new(10, 0);
        let x = Waveform::new(
            (0..240).map(|_| rng.normal_f64() as f32 * 0.4).collect(),
            8000,
        );
        let y = TensorBase::<f64>::param("y", rng.normal_vec(240), &[240]).unwrap();
        let res = [
            StftLossResolution {
                window_len: 80,
                hop: 20,
            },
            StftLossResolution {
                window_len: 40,
                hop: 10,
            },
        ];
        let forward = || multires_stft_loss_tensor(&x, &y, &res);
        let mut probe = RngState::new(11, 0);
        check_gradients(
            forward,
            &[y.clone()],
            GradCheckOptions {
                samples_per_tensor: 6,
                rel_tol: 2e-4,
                ..Default::default()
            },
            &mut probe,
        )
        .unwrap();
    }
}
