//! Seeded inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wolonet::dsp::Waveform;
use wolonet::trainer::Dataset;
use wolonet::wolo::{ActivationMode, WoloParams};
use wolonet::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Feature map `(C, T)` and block weights at unit scale.
pub fn wolo_case(
    channels: usize,
    len: usize,
    kernel: usize,
    dilation: usize,
    mode: ActivationMode,
) -> (Tensor, WoloParams) {
    let mut r = rng(channels as u64 * 1000 + len as u64);
    let x = Tensor::randn(vec![channels, len], 1.0, &mut r);
    let mut p = WoloParams::zeros(channels, kernel, dilation, mode).expect("odd kernel");
    p.u = Tensor::randn(p.u.shape().to_vec(), 0.3, &mut r);
    p.post_w = Tensor::randn(vec![channels, channels], 0.1, &mut r);
    (x, p)
}

pub fn clip(seconds: f64) -> Waveform {
    Dataset::synthetic(1, 7, 22050, seconds).clips.remove(0)
}

pub fn mel(frames: usize) -> Tensor {
    Tensor::randn(vec![80, frames], 1.0, &mut rng(frames as u64))
}
