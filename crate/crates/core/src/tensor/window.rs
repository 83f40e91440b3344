//! Dilated neighborhood extraction (`unfold1d`) and its overlap-add adjoint
//! (`fold1d`), with "same" zero padding so the time length is preserved.

use super::{Tensor, Var};
use crate::error::{Error, Result};

fn check_window(op: &'static str, kernel: usize, dilation: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(op, format!("kernel size {kernel} must be odd")));
    }
    if dilation == 0 {
        return Err(Error::invalid(op, "dilation must be at least 1"));
    }
    Ok(())
}

/// Signal position read by tap `p` of the window centred at `t`.
#[inline]
fn tap(t: usize, p: usize, half: usize, dilation: usize, len: usize) -> Option<usize> {
    let pos = (t + p * dilation).checked_sub(half * dilation)?;
    (pos < len).then_some(pos)
}

/// `x: (C, T)` -> `out: (T, K, C)`.
fn unfold_into(x: &[f64], channels: usize, len: usize, kernel: usize, dilation: usize, out: &mut [f64]) {
    let half = kernel / 2;
    for t in 0..len {
        for p in 0..kernel {
            let row = &mut out[(t * kernel + p) * channels..][..channels];
            match tap(t, p, half, dilation, len) {
                Some(s) => {
                    for (c, dst) in row.iter_mut().enumerate() {
                        *dst = x[c * len + s];
                    }
                }
                None => row.fill(0.0),
            }
        }
    }
}

/// `a: (T, K, C)` scatter-added into `out: (C, T)`. Returns the number of
/// in-range (window, tap) pairs.
fn fold_into(a: &[f64], channels: usize, len: usize, kernel: usize, dilation: usize, out: &mut [f64]) -> usize {
    let half = kernel / 2;
    let mut pairs = 0;
    for t in 0..len {
        for p in 0..kernel {
            if let Some(s) = tap(t, p, half, dilation, len) {
                pairs += 1;
                let row = &a[(t * kernel + p) * channels..][..channels];
                for (c, v) in row.iter().enumerate() {
                    out[c * len + s] += v;
                }
            }
        }
    }
    pairs
}

/// Leading batch extent and (C, T) of a rank-2 or rank-3 signal.
fn signal_dims(op: &'static str, shape: &[usize]) -> Result<(Option<usize>, usize, usize)> {
    match *shape {
        [c, t] => Ok((None, c, t)),
        [b, c, t] => Ok((Some(b), c, t)),
        _ => Err(Error::shape(op, &[shape])),
    }
}

fn unfold_tensor(x: &Tensor, kernel: usize, dilation: usize) -> Result<Tensor> {
    check_window("unfold1d", kernel, dilation)?;
    let (batch, channels, len) = signal_dims("unfold1d", x.shape())?;
    let nb = batch.unwrap_or(1);
    let mut out = vec![0.0; nb * len * kernel * channels];
    for b in 0..nb {
        unfold_into(
            &x.data()[b * channels * len..],
            channels,
            len,
            kernel,
            dilation,
            &mut out[b * len * kernel * channels..],
        );
    }
    let shape = match batch {
        Some(b) => vec![b, len, kernel, channels],
        None => vec![len, kernel, channels],
    };
    Ok(Tensor::from_parts(shape, out))
}

fn fold_tensor(a: &Tensor, kernel: usize, dilation: usize) -> Result<(Tensor, usize)> {
    check_window("fold1d", kernel, dilation)?;
    let (batch, len, channels) = match *a.shape() {
        [t, k, c] if k == kernel => (None, t, c),
        [b, t, k, c] if k == kernel => (Some(b), t, c),
        _ => return Err(Error::shape("fold1d", &[a.shape(), &[kernel]])),
    };
    let nb = batch.unwrap_or(1);
    let mut out = vec![0.0; nb * channels * len];
    let mut pairs = 0;
    for b in 0..nb {
        pairs += fold_into(
            &a.data()[b * len * kernel * channels..],
            channels,
            len,
            kernel,
            dilation,
            &mut out[b * channels * len..],
        );
    }
    let shape = match batch {
        Some(b) => vec![b, channels, len],
        None => vec![channels, len],
    };
    Ok((Tensor::from_parts(shape, out), pairs * channels))
}

/// K-neighborhood of every time step: `(C, T) -> (T, K, C)` (or batched
/// `(B, C, T) -> (B, T, K, C)`), with
/// `out[t][p][c] = x[c][t + (p - K/2) * dilation]`, zero outside the signal.
pub fn unfold1d(x: &Tensor, kernel: usize, dilation: usize) -> Result<Tensor> {
    unfold_tensor(x, kernel, dilation)
}

/// Overlap-add of per-step windows back onto the timeline; the exact adjoint
/// of [`unfold1d`] (no overlap normalization).
pub fn fold1d(a: &Tensor, kernel: usize, dilation: usize) -> Result<Tensor> {
    fold_tensor(a, kernel, dilation).map(|(t, _)| t)
}

impl<'t> Var<'t> {
    pub fn unfold1d(self, kernel: usize, dilation: usize) -> Result<Var<'t>> {
        let value = unfold_tensor(&self.value(), kernel, dilation)?;
        Ok(self.tape().record(value, &[self], move |g, _| {
            let (dx, _) = fold_tensor(g, kernel, dilation).expect("shape checked in forward");
            vec![Some(dx)]
        }))
    }

    pub fn fold1d(self, kernel: usize, dilation: usize) -> Result<Var<'t>> {
        let (value, adds) = fold_tensor(&self.value(), kernel, dilation)?;
        self.tape().count_madds(adds as u64);
        Ok(self.tape().record(value, &[self], move |g, _| {
            vec![Some(
                unfold_tensor(g, kernel, dilation).expect("shape checked in forward"),
            )]
        }))
    }
}
