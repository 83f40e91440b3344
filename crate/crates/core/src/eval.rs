//! Multiply-add accounting for the WOLO block against a dilated residual
//! convolution, and mel cepstral distortion between two waveforms.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::wolo::{ActivationMode, WoloParams};

/// Cepstral coefficients compared by [`mcd`], `c1..=c13`.
pub const MCD_ORDER: usize = 13;

/// Per-time-step multiply-adds of a WOLO block: kernel prediction,
/// kernel application with bias, then the pointwise mix with bias.
pub fn madds_wolo(channels: u64, kernel: u64) -> u64 {
    2 * (kernel * kernel + kernel) * channels + channels * channels + channels
}

/// `K·C²`, the count behind the published residual-block figure.
pub fn madds_resblock(channels: u64, kernel: u64) -> u64 {
    kernel * channels * channels
}

/// `K·C² + C`, the residual-block count including the bias add.
pub fn madds_resblock_with_bias(channels: u64, kernel: u64) -> u64 {
    madds_resblock(channels, kernel) + channels
}

pub fn madds_ratio(channels: u64, kernel: u64) -> f64 {
    madds_resblock(channels, kernel) as f64 / madds_wolo(channels, kernel) as f64
}

/// Allowed gap between [`empirical_madds`] and [`madds_wolo`].
pub fn madds_slack(channels: u64, kernel: u64) -> u64 {
    3 * kernel * kernel + 3 * kernel + 2 * channels
}

/// Multiply-adds counted by the tape while running WOLO attention and the
/// pointwise mix on a single time step.
pub fn empirical_madds(channels: usize, kernel: usize) -> Result<u64> {
    if channels == 0 || kernel == 0 {
        return Err(Error::invalid(
            "empirical_madds",
            "channels and kernel must be at least 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64((channels * 31 + kernel) as u64);
    let params = WoloParams::init(channels, kernel, 1, ActivationMode::Sine, &mut rng)?;
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let x = tape.constant(Tensor::randn(vec![channels, 1], 1.0, &mut rng));
    let before = tape.madds();
    vars.mix(vars.attention(x)?)?;
    Ok(tape.madds() - before)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MAddsReport {
    pub channels: u64,
    pub kernel: u64,
    pub wolo_madds: u64,
    pub resblock_madds: u64,
    pub resblock_with_bias: u64,
    pub ratio: f64,
    /// Tape count, when measured.
    pub empirical: Option<u64>,
}

impl MAddsReport {
    pub fn new(channels: u64, kernel: u64) -> Result<Self> {
        if channels == 0 || kernel == 0 {
            return Err(Error::invalid("madds", "channels and kernel must be at least 1"));
        }
        Ok(MAddsReport {
            channels,
            kernel,
            wolo_madds: madds_wolo(channels, kernel),
            resblock_madds: madds_resblock(channels, kernel),
            resblock_with_bias: madds_resblock_with_bias(channels, kernel),
            ratio: madds_ratio(channels, kernel),
            empirical: None,
        })
    }

    /// Adds the tape count.
    pub fn measured(mut self) -> Result<Self> {
        self.empirical = Some(empirical_madds(self.channels as usize, self.kernel as usize)?);
        Ok(self)
    }

    /// Whether the tape count lies within [`madds_slack`] of the closed form.
    pub fn empirical_agrees(&self) -> Option<bool> {
        self.empirical
            .map(|e| e.abs_diff(self.wolo_madds) <= madds_slack(self.channels, self.kernel))
    }
}

pub fn madds_table(channels: &[u64], kernels: &[u64]) -> Result<Vec<MAddsReport>> {
    channels
        .iter()
        .flat_map(|&c| kernels.iter().map(move |&k| MAddsReport::new(c, k)))
        .collect()
}

fn empirical_cell(r: &MAddsReport) -> String {
    r.empirical.map_or_else(|| "-".to_string(), |e| e.to_string())
}

pub fn render_markdown(rows: &[MAddsReport]) -> String {
    let mut out =
        String::from("| C | K | wolo | resblock | resblock+C | ratio | empirical |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.6} | {} |",
            r.channels,
            r.kernel,
            r.wolo_madds,
            r.resblock_madds,
            r.resblock_with_bias,
            r.ratio,
            empirical_cell(r)
        );
    }
    out
}

pub fn render_csv(rows: &[MAddsReport]) -> String {
    let mut out = String::from("C,K,wolo,resblock,resblock_with_bias,ratio,empirical\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{}",
            r.channels,
            r.kernel,
            r.wolo_madds,
            r.resblock_madds,
            r.resblock_with_bias,
            r.ratio,
            empirical_cell(r)
        );
    }
    out
}

/// `c1..=order` of the orthonormal DCT-II of each log-mel frame.
/// `log_mel: (n_mels, F)` in, `(F, order)` out.
pub fn mel_cepstrum(log_mel: &Tensor, order: usize) -> Result<Tensor> {
    let &[n, frames] = log_mel.shape() else {
        return Err(Error::shape("mel_cepstrum", &[log_mel.shape()]));
    };
    if order == 0 || order >= n {
        return Err(Error::invalid(
            "mel_cepstrum",
            format!("order {order} needs 1..{n} coefficients"),
        ));
    }
    let scale = (2.0 / n as f64).sqrt();
    let basis: Vec<f64> = (1..=order)
        .flat_map(|i| (0..n).map(move |m| scale * (PI * i as f64 * (m as f64 + 0.5) / n as f64).cos()))
        .collect();
    let data = log_mel.data();
    let mut out = vec![0.0; frames * order];
    for f in 0..frames {
        for i in 0..order {
            let row = &basis[i * n..][..n];
            out[f * order + i] = (0..n).map(|m| row[m] * data[m * frames + f]).sum();
        }
    }
    Tensor::new(vec![frames, order], out)
}

/// Mean over frames of `(10 / ln 10) · sqrt(2 · Σ (c - ĉ)²)` for cepstra
/// shaped `(F, order)`.
pub fn mcd_cepstra(reference: &Tensor, synthesized: &Tensor) -> Result<f64> {
    if reference.shape() != synthesized.shape() || reference.rank() != 2 {
        return Err(Error::shape("mcd", &[reference.shape(), synthesized.shape()]));
    }
    let &[frames, order] = reference.shape() else {
        unreachable!()
    };
    if frames == 0 {
        return Err(Error::invalid("mcd", "no frames"));
    }
    let (a, b) = (reference.data(), synthesized.data());
    let total: f64 = (0..frames)
        .map(|f| {
            let sq: f64 = (0..order).map(|i| (a[f * order + i] - b[f * order + i]).powi(2)).sum();
            (2.0 * sq).sqrt()
        })
        .sum();
    Ok(10.0 / LN_10 * total / frames as f64)
}

/// Mel cepstral distortion in dB between two time-aligned waveforms.
pub fn mcd(reference: &Waveform, synthesized: &Waveform, cfg: &MelConfig) -> Result<f64> {
    if reference.len() != synthesized.len() {
        return Err(Error::invalid(
            "mcd",
            format!("length mismatch: {} vs {} samples", reference.len(), synthesized.len()),
        ));
    }
    let spec = MelSpectrogram::new(cfg.clone())?;
    let ca = mel_cepstrum(&spec.compute(reference)?, MCD_ORDER)?;
    let cb = mel_cepstrum(&spec.compute(synthesized)?, MCD_ORDER)?;
    mcd_cepstra(&ca, &cb)
}
