//! Index-loop WOLO attention used as a test oracle. Shares no code with the
//! tape implementation beyond the tensor container.

use super::{ActivationMode, WoloParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn wolo_attention_reference(x: &Tensor, params: &WoloParams) -> Result<Tensor> {
    let &[channels, len] = x.shape() else {
        return Err(Error::shape("wolo_attention_reference", &[x.shape()]));
    };
    let k = params.kernel;
    let d = params.dilation as isize;
    if k.is_multiple_of(2) || d < 1 {
        return Err(Error::invalid(
            "wolo_attention_reference",
            "kernel must be odd, dilation positive",
        ));
    }
    let rows = k * k + k;
    if params.u.shape() != [rows, channels] || params.v.shape() != [rows] {
        return Err(Error::shape(
            "wolo_attention_reference",
            &[x.shape(), params.u.shape(), params.v.shape()],
        ));
    }
    let half = (k / 2) as isize;
    let xs = |c: usize, t: isize| -> f64 {
        if t < 0 || t >= len as isize {
            0.0
        } else {
            x.data()[c * len + t as usize]
        }
    };

    let mut out = vec![0.0; channels * len];
    for t in 0..len {
        // kernel prediction
        let mut pred = vec![0.0; rows];
        for (r, slot) in pred.iter_mut().enumerate() {
            let mut acc = params.v.data()[r];
            for c in 0..channels {
                acc += params.u.data()[r * channels + c] * x.data()[c * len + t];
            }
            *slot = acc;
        }
        let mut w = vec![0.0; k * k];
        for q in 0..k {
            let row = &pred[q * k..(q + 1) * k];
            match params.mode {
                ActivationMode::Sine => (0..k).for_each(|p| w[q * k + p] = row[p].sin()),
                ActivationMode::Tanh => (0..k).for_each(|p| w[q * k + p] = row[p].tanh()),
                ActivationMode::Softmax => {
                    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|r| (r - top).exp()).sum();
                    (0..k).for_each(|p| w[q * k + p] = (row[p] - top).exp() / z);
                }
            }
        }
        let bias = &pred[k * k..];

        // mix the neighbourhood, then scatter each output tap to its position
        for q in 0..k {
            let dest = t as isize + (q as isize - half) * d;
            if dest < 0 || dest >= len as isize {
                continue;
            }
            for c in 0..channels {
                let mut acc = bias[q];
                for p in 0..k {
                    acc += w[q * k + p] * xs(c, t as isize + (p as isize - half) * d);
                }
                out[c * len + dest as usize] += acc;
            }
        }
    }
    Tensor::new(vec![channels, len], out)
}
