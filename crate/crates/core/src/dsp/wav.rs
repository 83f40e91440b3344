use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
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
}

const FULL_SCALE: f64 = 32768.0;

fn to_pcm(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * FULL_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Reads 16-bit PCM mono RIFF/WAVE.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{} channels (mono required)",
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "{:?} {}-bit samples (16-bit PCM required)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono, clamping samples to `[-1, 1]`.
pub fn save_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample(to_pcm(s))?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round_trip(w: &Waveform) -> Waveform {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        save_wav(&path, w).unwrap();
        load_wav(&path).unwrap()
    }

    #[test]
    fn zeros_survive_exactly() {
        let w = Waveform::new(vec![0.0; 22050], 22050);
        assert_eq!(round_trip(&w), w);
    }

    #[test]
    fn random_signal_within_one_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut samples: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        samples.extend([1.0, -1.0, 0.99999, -0.99999]);
        let w = Waveform::new(samples, 16000);
        let back = round_trip(&w);
        assert_eq!(back.sample_rate, 16000);
        let worst = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
    }

    #[test]
    fn sine_rms_error_is_quantization_level() {
        let sr = 22050;
        let samples: Vec<f64> = (0..sr)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(samples, sr as u32);
        let back = round_trip(&w);
        let mse: f64 = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / sr as f64;
        // uniform quantization noise: lsb / sqrt(12)
        assert!(mse.sqrt() < 2e-5);
        assert!(mse.sqrt() > 0.5 / 32768.0 / 12f64.sqrt());
    }

    #[test]
    fn out_of_range_samples_are_clamped() {
        let w = Waveform::new(vec![3.0, -7.0], 8000);
        let back = round_trip(&w);
        assert_eq!(back.samples, vec![32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn rejects_stereo_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&stereo, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&stereo), Err(Error::UnsupportedAudio(_))));

        let float = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut wr = WavWriter::create(&float, spec).unwrap();
        wr.write_sample(0.5f32).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&float), Err(Error::UnsupportedAudio(_))));

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"RIFX not a wave file").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::Wav(_))));
    }
}
