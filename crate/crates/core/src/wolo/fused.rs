//! Single-node WOLO attention: kernel prediction, activation, neighbourhood
//! mixing and overlap-add in one pass per time step, with a hand-written
//! backward. Numerically the same computation as the composed tape ops.

use rayon::prelude::*;

use super::ActivationMode;
use crate::error::Result;
use crate::tensor::linalg::gemm;
use crate::tensor::{Tensor, Var};

struct Dims {
    channels: usize,
    len: usize,
    kernel: usize,
    dilation: usize,
}

impl Dims {
    fn rows(&self) -> usize {
        self.kernel * self.kernel + self.kernel
    }

    /// Position read or written by tap `p` of the window centred at `t`.
    #[inline]
    fn tap(&self, t: usize, p: usize) -> Option<usize> {
        let pos = (t + p * self.dilation).checked_sub(self.kernel / 2 * self.dilation)?;
        (pos < self.len).then_some(pos)
    }
}

fn activate_row(mode: ActivationMode, raw: &[f64], out: &mut [f64]) {
    match mode {
        ActivationMode::Sine => raw.iter().zip(out).for_each(|(r, o)| *o = r.sin()),
        ActivationMode::Tanh => raw.iter().zip(out).for_each(|(r, o)| *o = r.tanh()),
        ActivationMode::Softmax => {
            let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (r, o) in raw.iter().zip(out.iter_mut()) {
                *o = (r - top).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
    }
}

/// Overwrites `g` (gradient w.r.t. the activated row) with the gradient
/// w.r.t. the raw row.
fn activate_row_backward(mode: ActivationMode, raw: &[f64], act: &[f64], g: &mut [f64]) {
    match mode {
        ActivationMode::Sine => raw.iter().zip(g).for_each(|(r, g)| *g *= r.cos()),
        ActivationMode::Tanh => act.iter().zip(g).for_each(|(a, g)| *g *= 1.0 - a * a),
        ActivationMode::Softmax => {
            let dot: f64 = act.iter().zip(g.iter()).map(|(a, g)| a * g).sum();
            act.iter().zip(g).for_each(|(a, g)| *g = a * (*g - dot));
        }
    }
}

/// Forward for one batch item: fills `pred` `(T, R)` and `act` `(T, K*K)`,
/// accumulates into `out` `(C, T)`.
#[allow(clippy::too_many_arguments)]
fn forward_item(
    dims: &Dims,
    mode: ActivationMode,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    pred: &mut [f64],
    act: &mut [f64],
    out: &mut [f64],
) {
    let (c_n, len, k) = (dims.channels, dims.len, dims.kernel);
    let rows = dims.rows();
    let kk = k * k;
    for p in pred.chunks_mut(rows) {
        p.copy_from_slice(v);
    }
    // pred (T, R) += x^T (T, C) . u^T (C, R)
    gemm(true, true, len, rows, c_n, 1.0, x, u, 1.0, pred);
    for t in 0..len {
        let p = &pred[t * rows..][..rows];
        let w = &mut act[t * kk..][..kk];
        for q in 0..k {
            activate_row(mode, &p[q * k..][..k], &mut w[q * k..][..k]);
        }
        for q in 0..k {
            let Some(dest) = dims.tap(t, q) else { continue };
            let wq = &w[q * k..][..k];
            for c in 0..c_n {
                let xc = &x[c * len..][..len];
                let mut acc = p[kk + q];
                for (j, wj) in wq.iter().enumerate() {
                    if let Some(s) = dims.tap(t, j) {
                        acc += wj * xc[s];
                    }
                }
                out[c * len + dest] += acc;
            }
        }
    }
}

struct ItemGrads {
    x: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward_item(
    dims: &Dims,
    mode: ActivationMode,
    x: &[f64],
    u: &[f64],
    pred: &[f64],
    act: &[f64],
    g: &[f64],
) -> ItemGrads {
    let (c_n, len, k) = (dims.channels, dims.len, dims.kernel);
    let rows = dims.rows();
    let kk = k * k;
    let mut gx = vec![0.0; c_n * len];
    let mut gp_all = vec![0.0; len * rows];
    for t in 0..len {
        let gp = &mut gp_all[t * rows..][..rows];
        let w = &act[t * kk..][..kk];
        for q in 0..k {
            let Some(dest) = dims.tap(t, q) else { continue };
            for c in 0..c_n {
                let gy = g[c * len + dest];
                gp[kk + q] += gy;
                for j in 0..k {
                    if let Some(s) = dims.tap(t, j) {
                        gp[q * k + j] += gy * x[c * len + s];
                        gx[c * len + s] += w[q * k + j] * gy;
                    }
                }
            }
        }
        let p = &pred[t * rows..][..rows];
        for q in 0..k {
            let span = q * k..(q + 1) * k;
            activate_row_backward(mode, &p[span.clone()], &w[span.clone()], &mut gp[span]);
        }
    }
    let mut gu = vec![0.0; rows * c_n];
    let mut gv = vec![0.0; rows];
    for gp in gp_all.chunks(rows) {
        gv.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
    }
    // gu (R, C) = gp^T (R, T) . x^T (T, C);  gx (C, T) += u^T (C, R) . gp^T (R, T)
    gemm(true, true, rows, c_n, len, 1.0, &gp_all, x, 0.0, &mut gu);
    gemm(true, true, c_n, len, rows, 1.0, u, &gp_all, 1.0, &mut gx);
    ItemGrads { x: gx, u: gu, v: gv }
}

/// WOLO attention of `x: (B, C, T)` given `u: (K²+K, C)` and `v: (K²+K)`.
/// Shapes are validated by the caller.
pub(crate) fn fused_attention<'t>(
    x: Var<'t>,
    u: Var<'t>,
    v: Var<'t>,
    kernel: usize,
    dilation: usize,
    mode: ActivationMode,
) -> Result<Var<'t>> {
    let xv = x.value();
    let (uv, vv) = (u.value(), v.value());
    let &[batch, channels, len] = xv.shape() else {
        unreachable!("caller passes (B, C, T)")
    };
    let dims = Dims {
        channels,
        len,
        kernel,
        dilation,
    };
    let rows = dims.rows();
    let kk = kernel * kernel;

    let mut pred = vec![0.0; batch * len * rows];
    let mut act = vec![0.0; batch * len * kk];
    let mut out = vec![0.0; batch * channels * len];
    if !out.is_empty() && !pred.is_empty() {
        let (xs, us, vs) = (xv.data(), uv.data(), vv.data());
        let dims = &dims;
        pred.par_chunks_mut(len * rows)
            .zip(act.par_chunks_mut(len * kk))
            .zip(out.par_chunks_mut(channels * len))
            .enumerate()
            .for_each(|(b, ((p, a), o))| {
                forward_item(dims, mode, &xs[b * channels * len..][..channels * len], us, vs, p, a, o)
            });
    }

    let positions = (batch * len) as u64;
    let in_range = (0..len)
        .map(|t| (0..kernel).filter(|&q| dims.tap(t, q).is_some()).count() as u64)
        .sum::<u64>()
        * batch as u64;
    let c = channels as u64;
    let (r, k) = (rows as u64, kernel as u64);
    x.tape()
        .count_madds(positions * (r * c + r + k * k * c + k * c) + in_range * c);

    let value = Tensor::from_parts(vec![batch, channels, len], out);
    Ok(x.tape().record(value, &[x, u, v], move |g, mask| {
        let (xs, us, gs) = (xv.data(), uv.data(), g.data());
        let (pred, act) = (&pred, &act);
        let dims = &dims;
        let items: Vec<ItemGrads> = (0..batch)
            .into_par_iter()
            .map(|b| {
                backward_item(
                    dims,
                    mode,
                    &xs[b * channels * len..][..channels * len],
                    us,
                    &pred[b * len * rows..][..len * rows],
                    &act[b * len * kk..][..len * kk],
                    &gs[b * channels * len..][..channels * len],
                )
            })
            .collect();
        let gx = mask[0].then(|| {
            let data = items.iter().flat_map(|i| i.x.iter().copied()).collect();
            Tensor::from_parts(vec![batch, channels, len], data)
        });
        let sum = |pick: fn(&ItemGrads) -> &Vec<f64>, n: usize| {
            let mut acc = vec![0.0; n];
            for item in &items {
                acc.iter_mut().zip(pick(item)).for_each(|(a, v)| *a += v);
            }
            acc
        };
        let gu = mask[1].then(|| Tensor::from_parts(vec![rows, channels], sum(|i| &i.u, rows * channels)));
        let gv = mask[2].then(|| Tensor::from_parts(vec![rows], sum(|i| &i.v, rows)));
        vec![gx, gu, gv]
    }))
}
