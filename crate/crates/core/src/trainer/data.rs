use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{load_wav, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory collection of mono clips.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub clips: Vec<Waveform>,
}

impl Dataset {
    pub fn new(clips: Vec<Waveform>) -> Self {
        Dataset { clips }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Every `.wav` file directly inside `dir`, in name order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let clips = paths.iter().map(load_wav).collect::<Result<Vec<_>>>()?;
        if clips.is_empty() {
            return Err(Error::Dataset(format!("no .wav files in {}", dir.as_ref().display())));
        }
        Ok(Dataset { clips })
    }

    /// Harmonic test signals: 3 to 8 harmonics of a random fundamental in
    /// 80..400 Hz under a slow amplitude envelope, plus faint noise.
    pub fn synthetic(count: usize, seed: u64, sample_rate: u32, seconds: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = (seconds * sample_rate as f64).round() as usize;
        let sr = sample_rate as f64;
        let noise = Normal::new(0.0, 0.003).expect("valid std");
        let clips = (0..count)
            .map(|_| {
                let f0 = rng.random_range(80.0..400.0);
                let harmonics = rng.random_range(3..=8usize);
                let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
                    .filter(|&h| (h as f64) * f0 < 0.45 * sr)
                    .map(|h| {
                        let amp = rng.random_range(0.3..1.0) / h as f64;
                        (h as f64 * f0, amp, rng.random_range(0.0..2.0 * PI))
                    })
                    .collect();
                let norm: f64 = partials.iter().map(|p| p.1).sum();
                let am_rate = rng.random_range(0.5..4.0);
                let am_depth = rng.random_range(0.2..0.7);
                let am_phase = rng.random_range(0.0..2.0 * PI);
                let peak = rng.random_range(0.3..0.6);
                let samples = (0..len)
                    .map(|n| {
                        let t = n as f64 / sr;
                        let tone: f64 = partials
                            .iter()
                            .map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                            .sum();
                        let env = 1.0 - am_depth * (0.5 + 0.5 * (2.0 * PI * am_rate * t + am_phase).sin());
                        (peak * env * tone / norm + noise.sample(&mut rng)).clamp(-1.0, 1.0)
                    })
                    .collect();
                Waveform::new(samples, sample_rate)
            })
            .collect();
        Dataset { clips }
    }

    /// Splits off the last `n` clips.
    pub fn split_off(&mut self, n: usize) -> Dataset {
        let at = self.clips.len().saturating_sub(n);
        Dataset {
            clips: self.clips.split_off(at),
        }
    }
}

/// A training example: a hop-aligned crop and its log-mel.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `(n_mels, samples / hop)`.
    pub mel: Tensor,
    pub wave: Tensor,
    pub clip: usize,
    pub offset: usize,
}

/// Crops `samples` from a random clip at a random multiple of the hop, and
/// computes the mel of exactly those samples.
pub fn sample_segment<R: Rng + ?Sized>(
    data: &Dataset,
    mel: &MelSpectrogram,
    samples: usize,
    rng: &mut R,
) -> Result<Segment> {
    let hop = mel.config().hop;
    if !samples.is_multiple_of(hop) || samples == 0 {
        return Err(Error::Config(format!(
            "segment {samples} is not a positive multiple of the hop {hop}"
        )));
    }
    let usable: Vec<usize> = (0..data.len()).filter(|&i| data.clips[i].len() >= samples).collect();
    if usable.len() < data.len() {
        log::warn!(
            "{} of {} clips shorter than {samples} samples are skipped",
            data.len() - usable.len(),
            data.len()
        );
    }
    if usable.is_empty() {
        return Err(Error::Dataset(format!("no clip has at least {samples} samples")));
    }
    let clip = usable[rng.random_range(0..usable.len())];
    let slots = (data.clips[clip].len() - samples) / hop;
    let offset = hop * rng.random_range(0..=slots);
    let crop = Waveform::new(
        data.clips[clip].samples[offset..offset + samples].to_vec(),
        data.clips[clip].sample_rate,
    );
    Ok(Segment {
        mel: mel.compute(&crop)?,
        wave: Tensor::from_vec(crop.samples),
        clip,
        offset,
    })
}

/// Stacks segments into `(B, n_mels, F)` mels and `(B, L)` waves.
pub fn collate(segments: &[Segment]) -> Result<(Tensor, Tensor)> {
    let first = segments.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (m, f) = (first.mel.shape()[0], first.mel.shape()[1]);
    let l = first.wave.len();
    let mut mel = Vec::with_capacity(segments.len() * m * f);
    let mut wave = Vec::with_capacity(segments.len() * l);
    for s in segments {
        mel.extend_from_slice(s.mel.data());
        wave.extend_from_slice(s.wave.data());
    }
    Ok((
        Tensor::new(vec![segments.len(), m, f], mel)?,
        Tensor::new(vec![segments.len(), l], wave)?,
    ))
}
