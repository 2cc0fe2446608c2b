//! WAV ingestion and emission: PCM 16-bit mono, 8 kHz canonical.

use std::path::Path;

use super::{resample, Waveform};
use crate::error::{Error, Result};

fn ingestion_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Read a WAV file as mono f32. Multi-channel input is averaged down;
/// when `target_rate` is given the result is polyphase-resampled to it.
pub fn read_wav(path: &Path, target_rate: Option<u32>) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| ingestion_err(path, e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(ingestion_err(path, "zero channels"));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ingestion_err(path, e.to_string()))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ingestion_err(path, e.to_string()))?,
    };
    let frames = interleaved.len() / channels;
    let mono: Vec<f32> = (0..frames)
        .map(|i| {
            let mut acc = 0.0f32;
            for c in 0..channels {
                acc += interleaved[i * channels + c];
            }
            acc / channels as f32
        })
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate);
    wave.validate()
        .map_err(|e| ingestion_err(path, e.to_string()))?;
    match target_rate {
        Some(rate) if rate != wave.sample_rate => resample(&wave, rate),
        _ => Ok(wave),
    }
}

/// Write PCM 16-bit mono. Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Signal(e.to_string()))?;
    for &v in &wave.samples {
        let q = (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Signal(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Signal(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let mut rng = RngState::new(1, 0);
        let x = Waveform::new(
            (0..2000).map(|_| (rng.normal_f64() * 0.2) as f32).collect(),
            8000,
        );
        write_wav(&path, &x).unwrap();
        let y = read_wav(&path, None).unwrap();
        assert_eq!(y.sample_rate, 8000);
        assert_eq!(y.len(), x.len());
        for (a, b) in x.samples.iter().zip(&y.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn read_resamples_on_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hi.wav");
        let x = Waveform::new(vec![0.25; 16000], 16000);
        write_wav(&path, &x).unwrap();
        let y = read_wav(&path, Some(8000)).unwrap();
        assert_eq!(y.sample_rate, 8000);
        assert!((y.len() as i64 - 8000).abs() <= 1);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_wav(Path::new("/nonexistent/xyz.wav"), None).unwrap_err();
        assert!(err.to_string().contains("xyz.wav"));
        assert_eq!(err.category(), "ingestion");
    }
}
