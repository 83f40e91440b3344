//! Log-mel spectrogram frontend.
//!
//! Framing follows the vocoder convention: the signal is reflect-padded by
//! `(n_fft - hop) / 2` on the left and enough on the right that exactly
//! `ceil(len / hop)` frames fit, so frame `t` covers padded samples
//! `[t * hop, t * hop + n_fft)` and a generator upsampling by `hop` lines up
//! sample-for-frame.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::{PadMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            win_length: 1024,
            n_mels: 80,
            fmin: 80.0,
            fmax: 7600.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("mel: {m}")));
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.n_fft {
            return fail(format!(
                "need 0 < hop ({}) <= win_length ({}) <= n_fft ({})",
                self.hop, self.win_length, self.n_fft
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return fail(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= {nyquist}",
                self.fmin, self.fmax
            ));
        }
        if self.n_mels == 0 {
            return fail("n_mels must be at least 1".into());
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return fail("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters `(n_mels, n_fft / 2 + 1)` with corner frequencies evenly
/// spaced on the mel scale between `fmin` and `fmax`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n_freqs = cfg.n_freqs();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let corners: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = vec![0.0; cfg.n_mels * n_freqs];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (corners[m], corners[m + 1], corners[m + 2]);
        let row = &mut fb[m * n_freqs..][..n_freqs];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel: filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; raise n_fft or lower n_mels"
            )));
        }
    }
    Ok(Tensor::from_parts(vec![cfg.n_mels, n_freqs], fb))
}

/// Periodic Hann window of `win_length`, centred in `n_fft` zeros.
fn analysis_window(cfg: &MelConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    for n in 0..cfg.win_length {
        let phase = 2.0 * std::f64::consts::PI * n as f64 / cfg.win_length as f64;
        w[offset + n] = 0.5 - 0.5 * phase.cos();
    }
    w
}

/// Precomputed filterbank and window for one [`MelConfig`].
#[derive(Clone, Debug)]
pub struct MelSpectrogram {
    cfg: MelConfig,
    filterbank: Tensor,
    window: Arc<Vec<f64>>,
}

impl MelSpectrogram {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        let filterbank = mel_filterbank(&cfg)?;
        let window = Arc::new(analysis_window(&cfg));
        Ok(MelSpectrogram {
            cfg,
            filterbank,
            window,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    /// Reflect-pads `(B, L)` so that `ceil(L / hop)` full frames fit.
    fn frame_padding(&self, len: usize) -> (usize, usize, usize) {
        let frames = self.cfg.n_frames(len);
        let left = (self.cfg.n_fft - self.cfg.hop) / 2;
        let right = (frames - 1) * self.cfg.hop + self.cfg.n_fft - len - left;
        (left, right, frames)
    }

    /// Linear-magnitude mel energies `(B, n_mels, F)` of `x: (B, L)`, before
    /// the log.
    pub fn mel_energy<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let &[_, len] = shape.as_slice() else {
            return Err(Error::shape("log_mel", &[&shape]));
        };
        if len < self.cfg.win_length {
            return Err(Error::invalid(
                "log_mel",
                format!(
                    "{len} samples is shorter than the {}-sample window",
                    self.cfg.win_length
                ),
            ));
        }
        let (left, right, frames) = self.frame_padding(len);
        let padded = x.pad(1, left, right, PadMode::Reflect)?;
        let mags = stft_magnitude(padded, &self.window, self.cfg.hop, frames)?;
        let fb = x.tape().constant(self.filterbank.clone());
        fb.matmul(mags)
    }

    /// Natural-log mel spectrogram of `x: (L)` or `(B, L)`, giving `(n_mels, F)`
    /// or `(B, n_mels, F)`. Differentiable with respect to `x`.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let batched = match shape.len() {
            1 => x.reshape(vec![1, shape[0]])?,
            2 => x,
            _ => return Err(Error::shape("log_mel", &[&shape])),
        };
        let logmel = self.mel_energy(batched)?.clamp_min(self.cfg.log_floor).log()?;
        if shape.len() == 1 {
            let s = logmel.shape();
            logmel.reshape(vec![s[1], s[2]])
        } else {
            Ok(logmel)
        }
    }

    /// `(n_mels, F)` log-mel spectrogram of a waveform.
    pub fn compute(&self, wave: &Waveform) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(wave.samples.clone()));
        Ok(self.forward(x)?.to_tensor())
    }
}

/// Log-mel spectrogram `(n_mels, ceil(len / hop))` of `wave`.
pub fn log_mel(wave: &Waveform, cfg: &MelConfig) -> Result<Tensor> {
    MelSpectrogram::new(cfg.clone())?.compute(wave)
}

/// `|FFT(window * frame)|` over bins `0..=n_fft/2` for `frames` hop-spaced
/// frames of `x: (B, L)`; output `(B, n_fft/2 + 1, frames)`.
fn stft_magnitude<'t>(x: Var<'t>, window: &Arc<Vec<f64>>, hop: usize, frames: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let (batch, len) = (xv.shape()[0], xv.shape()[1]);
    let n_fft = window.len();
    if frames == 0 || (frames - 1) * hop + n_fft > len {
        return Err(Error::invalid(
            "stft",
            format!("{frames} frames do not fit {len} samples"),
        ));
    }
    let n_freqs = n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let xs = xv.data();

    // spectra[(b * frames + f) * n_freqs + k]
    let spectra: Vec<Complex<f64>> = (0..batch * frames)
        .into_par_iter()
        .flat_map_iter(|bf| {
            let (b, f) = (bf / frames, bf % frames);
            let seg = &xs[b * len + f * hop..][..n_fft];
            let mut buf: Vec<Complex<f64>> = seg
                .iter()
                .zip(window.iter())
                .map(|(s, w)| Complex::new(s * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(n_freqs);
            buf
        })
        .collect();

    let mut mags = vec![0.0; batch * n_freqs * frames];
    for b in 0..batch {
        for f in 0..frames {
            for k in 0..n_freqs {
                mags[(b * n_freqs + k) * frames + f] = spectra[(b * frames + f) * n_freqs + k].norm();
            }
        }
    }
    x.tape().count_madds((batch * frames * n_fft * n_freqs) as u64);

    let window = Arc::clone(window);
    let value = Tensor::from_parts(vec![batch, n_freqs, frames], mags);
    Ok(x.tape().record(value, &[x], move |g, _| {
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
        let gd = g.data();
        let frame_grads: Vec<Vec<f64>> = (0..batch * frames)
            .into_par_iter()
            .map(|bf| {
                let (b, f) = (bf / frames, bf % frames);
                let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
                for k in 0..n_freqs {
                    let z = spectra[bf * n_freqs + k];
                    let mag = z.norm();
                    if mag > 0.0 {
                        buf[k] = z * (gd[(b * n_freqs + k) * frames + f] / mag);
                    }
                }
                // d|X_k|/dx_n summed over k is Re(sum_k G_k e^{+i 2 pi k n / N})
                ifft.process(&mut buf);
                buf.iter().zip(window.iter()).map(|(z, w)| z.re * w).collect()
            })
            .collect();
        let mut dx = vec![0.0; batch * len];
        for (bf, fg) in frame_grads.iter().enumerate() {
            let (b, f) = (bf / frames, bf % frames);
            for (d, v) in dx[b * len + f * hop..][..n_fft].iter_mut().zip(fg) {
                *d += v;
            }
        }
        vec![Some(Tensor::from_parts(vec![batch, len], dx))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_every_row_positive() {
        let cfg = MelConfig::default();
        cfg.validate().unwrap();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.shape(), &[80, 513]);
        for m in 0..80 {
            let row = &fb.data()[m * 513..][..513];
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn single_filter_peaks_inside_range() {
        let cfg = MelConfig {
            n_mels: 1,
            ..MelConfig::default()
        };
        let fb = mel_filterbank(&cfg).unwrap();
        let (k, _) = fb
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (k, &w)| if w > best.1 { (k, w) } else { best });
        let peak_hz = k as f64 * 22050.0 / 1024.0;
        assert!(peak_hz > 80.0 && peak_hz < 7600.0);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let bad = MelConfig {
            fmin: 8000.0,
            fmax: 7600.0,
            ..MelConfig::default()
        };
        assert!(mel_filterbank(&bad).is_err());
        let bad = MelConfig {
            hop: 2048,
            ..MelConfig::default()
        };
        assert!(bad.validate().is_err());
        let too_fine = MelConfig {
            n_mels: 400,
            ..MelConfig::default()
        };
        assert!(mel_filterbank(&too_fine).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 80.0, 1000.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::default();
        let m = log_mel(&Waveform::new(vec![0.0; 8192], 22050), &cfg).unwrap();
        assert_eq!(m.shape(), &[80, 32]);
        for &v in m.data() {
            assert!((v - 1e-5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_count_is_ceil_of_hops() {
        let cfg = MelConfig::default();
        let spec = MelSpectrogram::new(cfg).unwrap();
        for len in [1024, 1025, 8192, 8200, 22050] {
            let w = Waveform::new(vec![0.1; len], 22050);
            assert_eq!(spec.compute(&w).unwrap().shape()[1], len.div_ceil(256));
        }
        assert!(spec.compute(&Waveform::new(vec![0.0; 1023], 22050)).is_err());
    }

    #[test]
    fn stft_magnitude_scales_linearly() {
        let cfg = MelConfig::default();
        let spec = MelSpectrogram::new(cfg).unwrap();
        let x: Vec<f64> = (0..4096).map(|n| (n as f64 * 0.05).sin() * 0.3).collect();
        let tape = Tape::new();
        let a = spec
            .mel_energy(tape.constant(Tensor::new(vec![1, 4096], x.clone()).unwrap()))
            .unwrap()
            .to_tensor();
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let b = spec
            .mel_energy(tape.constant(Tensor::new(vec![1, 4096], doubled).unwrap()))
            .unwrap()
            .to_tensor();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((2.0 * p - q).abs() <= 1e-12 * q.abs().max(1e-30));
        }
    }

    #[test]
    fn filter_centres_are_monotone() {
        let fb = mel_filterbank(&MelConfig::default()).unwrap();
        let n = 513;
        let peaks: Vec<usize> = (0..80)
            .map(|m| {
                let row = &fb.data()[m * n..][..n];
                (0..n).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect();
        assert!(peaks.windows(2).all(|w| w[0] <= w[1]), "{peaks:?}");
    }

    #[test]
    fn tone_lands_in_nearest_filter() {
        let cfg = MelConfig::default();
        let sr = cfg.sample_rate as f64;
        let x: Vec<f64> = (0..8192)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / sr).sin())
            .collect();
        let m = log_mel(&Waveform::new(x, cfg.sample_rate), &cfg).unwrap();
        let frames = m.shape()[1];
        let mid = frames / 2;
        let argmax = (0..80).fold(0, |b, i| if m.at(&[i, mid]) > m.at(&[b, mid]) { i } else { b });

        // centres straight from the mel formula, independent of the filterbank
        let (lo, hi) = (
            2595.0 * (1.0 + 80.0 / 700.0f64).log10(),
            2595.0 * (1.0 + 7600.0 / 700.0f64).log10(),
        );
        let nearest = (0..80)
            .map(|i| {
                let mel = lo + (hi - lo) * (i + 1) as f64 / 81.0;
                (i, (700.0 * (10f64.powf(mel / 2595.0) - 1.0) - 1000.0).abs())
            })
            .fold((0, f64::MAX), |b, c| if c.1 < b.1 { c } else { b })
            .0;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn delay_by_one_hop_shifts_one_frame() {
        let cfg = MelConfig::default();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let x: Vec<f64> = (0..6144)
            .map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5))
            .collect();
        let mut delayed = vec![0.0; 256];
        delayed.extend_from_slice(&x[..x.len() - 256]);
        let a = log_mel(&Waveform::new(x, 22050), &cfg).unwrap();
        let b = log_mel(&Waveform::new(delayed, 22050), &cfg).unwrap();
        let frames = a.shape()[1];
        // frames whose window stays clear of both padded edges
        for t in 4..frames - 4 {
            for m in 0..80 {
                assert!((a.at(&[m, t]) - b.at(&[m, t + 1])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn log_mel_gradient_matches_finite_differences() {
        let cfg = MelConfig {
            n_fft: 64,
            hop: 16,
            win_length: 48,
            n_mels: 8,
            sample_rate: 8000,
            fmin: 0.0,
            fmax: 4000.0,
            log_floor: 1e-5,
        };
        let spec = MelSpectrogram::new(cfg).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let x = Tensor::uniform(vec![2, 100], -0.5, 0.5, &mut rng);
        let weights = Tensor::uniform(vec![2, 8, 7], -1.0, 1.0, &mut rng);
        let err = crate::tensor::grad_check(
            |tape, p| {
                let w = tape.constant(weights.clone());
                Ok(spec.forward(p[0])?.mul(w)?.sum())
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
