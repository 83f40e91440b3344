//! 1-D convolution family over `(batch, channels, time)` tensors.
//!
//! Forward passes lower to im2col + GEMM per batch item and run batch items in
//! parallel. Weight gradients are reduced over the batch in index order so
//! results do not depend on scheduling.

use rayon::prelude::*;

use super::linalg::gemm;
use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding `dilation * (K - 1)` split left-heavy-last, output length
    /// equals input length. Only valid at stride 1.
    Same,
    /// Explicit (left, right) zero padding.
    Explicit(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Explicit(0, 0),
        }
    }
}

impl Conv1dSpec {
    pub fn same() -> Self {
        Conv1dSpec {
            padding: Padding::Same,
            ..Default::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, left: usize, right: usize) -> Self {
        self.padding = Padding::Explicit(left, right);
        self
    }

    fn resolve_padding(&self, kernel: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Explicit(l, r) => Ok((l, r)),
            Padding::Same if self.stride == 1 => {
                let total = self.dilation * (kernel - 1);
                Ok((total / 2, total - total / 2))
            }
            Padding::Same => Err(Error::invalid("conv1d", "same padding requires stride 1")),
        }
    }
}

/// Window geometry shared by im2col and col2im: column `j`, tap `k` reads
/// signal position `j * stride + k * dilation - pad_left`.
#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    cols: usize,
}

impl Geometry {
    #[inline]
    fn source(&self, j: usize, k: usize) -> Option<usize> {
        let pos = (j * self.stride + k * self.dilation).checked_sub(self.pad_left)?;
        (pos < self.len).then_some(pos)
    }

    /// `(channels * kernel) x cols` patch matrix of `signal` (`channels x len`).
    fn im2col(&self, signal: &[f64], out: &mut [f64]) {
        for c in 0..self.channels {
            let src = &signal[c * self.len..][..self.len];
            for k in 0..self.kernel {
                let row = &mut out[(c * self.kernel + k) * self.cols..][..self.cols];
                for (j, dst) in row.iter_mut().enumerate() {
                    *dst = self.source(j, k).map_or(0.0, |p| src[p]);
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds patches into `signal`.
    fn col2im(&self, cols: &[f64], signal: &mut [f64]) {
        for c in 0..self.channels {
            let dst = &mut signal[c * self.len..][..self.len];
            for k in 0..self.kernel {
                let row = &cols[(c * self.kernel + k) * self.cols..][..self.cols];
                for (j, v) in row.iter().enumerate() {
                    if let Some(p) = self.source(j, k) {
                        dst[p] += v;
                    }
                }
            }
        }
    }
}

fn bias_shape_ok(bias: &Option<Var<'_>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape("conv bias", &[&b.shape(), &[channels]])),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], len: usize) {
    for (row, b) in out.chunks_mut(len).zip(bias.iter().cycle()) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &[f64], batch: usize, channels: usize, len: usize) -> Tensor {
    let mut db = vec![0.0; channels];
    for b in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            *d += g[(b * channels + c) * len..][..len].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![channels], db)
}

fn sum_partials(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

impl<'t> Var<'t> {
    /// Convolution of `x: (B, Cin, T)` with `w: (Cout, Cin / groups, K)`.
    pub fn conv1d(self, w: Var<'t>, bias: Option<Var<'t>>, spec: Conv1dSpec) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let shape_err = || Error::shape("conv1d", &[x.shape(), wv.shape()]);
        if x.rank() != 3 || wv.rank() != 3 || spec.stride == 0 || spec.dilation == 0 {
            return Err(shape_err());
        }
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_g, kernel) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g || kernel == 0 {
            return Err(shape_err());
        }
        bias_shape_ok(&bias, cout)?;
        let (pl, pr) = spec.resolve_padding(kernel)?;
        let span = spec.dilation * (kernel - 1) + 1;
        if len + pl + pr < span {
            return Err(Error::invalid(
                "conv1d",
                format!("input length {len} shorter than receptive span {span}"),
            ));
        }
        let out_len = (len + pl + pr - span) / spec.stride + 1;
        let cout_g = cout / groups;
        let geo = Geometry {
            channels: cin_g,
            len,
            kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            pad_left: pl,
            cols: out_len,
        };
        let rows = cin_g * kernel;

        let mut out = vec![0.0; batch * cout * out_len];
        {
            let (xd, wd) = (x.data(), wv.data());
            out.par_chunks_mut(cout * out_len).enumerate().for_each(|(b, ob)| {
                let mut cols = vec![0.0; rows * out_len];
                for g in 0..groups {
                    geo.im2col(&xd[(b * cin + g * cin_g) * len..], &mut cols);
                    gemm(
                        false,
                        false,
                        cout_g,
                        out_len,
                        rows,
                        1.0,
                        &wd[g * cout_g * rows..],
                        &cols,
                        0.0,
                        &mut ob[g * cout_g * out_len..],
                    );
                }
            });
        }
        if let Some(b) = &bias {
            let bv = b.value();
            out.chunks_mut(cout * out_len)
                .for_each(|ob| add_bias(ob, bv.data(), out_len));
        }
        self.tape().count_madds((batch * cout * out_len * rows) as u64);

        let mut parents = vec![self, w];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![batch, cout, out_len], out);
        Ok(self.tape().record(value, &parents, move |g, mask| {
            let gd = g.data();
            let (xd, wd) = (x.data(), wv.data());
            let w_len = wv.len();
            let dx = mask[0].then(|| {
                let mut dx = vec![0.0; x.len()];
                dx.par_chunks_mut(cin * len).enumerate().for_each(|(b, dxb)| {
                    let mut cols = vec![0.0; rows * out_len];
                    for gi in 0..groups {
                        gemm(
                            true,
                            false,
                            rows,
                            out_len,
                            cout_g,
                            1.0,
                            &wd[gi * cout_g * rows..],
                            &gd[(b * cout + gi * cout_g) * out_len..],
                            0.0,
                            &mut cols,
                        );
                        geo.col2im(&cols, &mut dxb[gi * cin_g * len..]);
                    }
                });
                Tensor::from_parts(x.shape().to_vec(), dx)
            });
            let dw = mask[1].then(|| {
                let partials: Vec<Vec<f64>> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let mut dwb = vec![0.0; w_len];
                        let mut cols = vec![0.0; rows * out_len];
                        for gi in 0..groups {
                            geo.im2col(&xd[(b * cin + gi * cin_g) * len..], &mut cols);
                            gemm(
                                false,
                                true,
                                cout_g,
                                rows,
                                out_len,
                                1.0,
                                &gd[(b * cout + gi * cout_g) * out_len..],
                                &cols,
                                0.0,
                                &mut dwb[gi * cout_g * rows..],
                            );
                        }
                        dwb
                    })
                    .collect();
                Tensor::from_parts(wv.shape().to_vec(), sum_partials(partials, wv.len()))
            });
            let mut grads = vec![dx, dw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| bias_grad(gd, batch, cout, out_len)));
            }
            grads
        }))
    }

    /// Transposed convolution of `x: (B, Cin, T)` with `w: (Cin, Cout, K)`:
    /// output length `(T - 1) * stride + K - 2 * padding`.
    pub fn conv_transpose1d(self, w: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let shape_err = || Error::shape("conv_transpose1d", &[x.shape(), wv.shape()]);
        if x.rank() != 3 || wv.rank() != 3 || stride == 0 || x.shape()[1] != wv.shape()[0] {
            return Err(shape_err());
        }
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kernel) = (wv.shape()[1], wv.shape()[2]);
        bias_shape_ok(&bias, cout)?;
        let full = (len.max(1) - 1) * stride + kernel;
        if len == 0 || full <= 2 * padding {
            return Err(shape_err());
        }
        let out_len = full - 2 * padding;
        let geo = Geometry {
            channels: cout,
            len: out_len,
            kernel,
            stride,
            dilation: 1,
            pad_left: padding,
            cols: len,
        };
        let rows = cout * kernel;

        let mut out = vec![0.0; batch * cout * out_len];
        {
            let (xd, wd) = (x.data(), wv.data());
            out.par_chunks_mut(cout * out_len).enumerate().for_each(|(b, ob)| {
                let mut cols = vec![0.0; rows * len];
                gemm(
                    true,
                    false,
                    rows,
                    len,
                    cin,
                    1.0,
                    wd,
                    &xd[b * cin * len..],
                    0.0,
                    &mut cols,
                );
                geo.col2im(&cols, ob);
            });
        }
        if let Some(b) = &bias {
            let bv = b.value();
            out.chunks_mut(cout * out_len)
                .for_each(|ob| add_bias(ob, bv.data(), out_len));
        }
        self.tape().count_madds((batch * cin * len * rows) as u64);

        let mut parents = vec![self, w];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![batch, cout, out_len], out);
        Ok(self.tape().record(value, &parents, move |g, mask| {
            let gd = g.data();
            let (xd, wd) = (x.data(), wv.data());
            let w_len = wv.len();
            let gather = |b: usize| {
                let mut cols = vec![0.0; rows * len];
                geo.im2col(&gd[b * cout * out_len..], &mut cols);
                cols
            };
            let dx = mask[0].then(|| {
                let mut dx = vec![0.0; x.len()];
                dx.par_chunks_mut(cin * len).enumerate().for_each(|(b, dxb)| {
                    let cols = gather(b);
                    gemm(false, false, cin, len, rows, 1.0, wd, &cols, 0.0, dxb);
                });
                Tensor::from_parts(x.shape().to_vec(), dx)
            });
            let dw = mask[1].then(|| {
                let partials: Vec<Vec<f64>> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let cols = gather(b);
                        let mut dwb = vec![0.0; w_len];
                        gemm(
                            false,
                            true,
                            cin,
                            rows,
                            len,
                            1.0,
                            &xd[b * cin * len..],
                            &cols,
                            0.0,
                            &mut dwb,
                        );
                        dwb
                    })
                    .collect();
                Tensor::from_parts(wv.shape().to_vec(), sum_partials(partials, wv.len()))
            });
            let mut grads = vec![dx, dw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| bias_grad(gd, batch, cout, out_len)));
            }
            grads
        }))
    }

    /// Average pooling over the last axis of `(B, C, T)`, zero padding counted
    /// in the divisor.
    pub fn avg_pool1d(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 || kernel == 0 || stride == 0 || x.shape()[2] + 2 * padding < kernel {
            return Err(Error::invalid(
                "avg_pool1d",
                format!("kernel {kernel} stride {stride} on {:?}", x.shape()),
            ));
        }
        let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let geo = Geometry {
            channels: 1,
            len,
            kernel,
            stride,
            dilation: 1,
            pad_left: padding,
            cols: out_len,
        };
        let scale = 1.0 / kernel as f64;
        let rows = batch * channels;
        let xd = x.data();
        let mut out = vec![0.0; rows * out_len];
        for r in 0..rows {
            let src = &xd[r * len..][..len];
            for j in 0..out_len {
                let s: f64 = (0..kernel).filter_map(|k| geo.source(j, k)).map(|p| src[p]).sum();
                out[r * out_len + j] = s * scale;
            }
        }
        let in_shape = x.shape().to_vec();
        let value = Tensor::from_parts(vec![batch, channels, out_len], out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; rows * len];
            for r in 0..rows {
                for j in 0..out_len {
                    let v = gd[r * out_len + j] * scale;
                    for p in (0..kernel).filter_map(|k| geo.source(j, k)) {
                        dx[r * len + p] += v;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of a grouped, dilated, strided, padded convolution.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        s: usize,
        d: usize,
        g: usize,
        pl: usize,
        out_len: usize,
    ) -> Tensor {
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let cout_g = cout / g;
        let mut out = Tensor::zeros(vec![batch, cout, out_len]);
        for bi in 0..batch {
            for co in 0..cout {
                let grp = co / cout_g;
                for t in 0..out_len {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for kk in 0..k {
                            let pos = (t * s + kk * d) as isize - pl as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += w.at(&[co, ci, kk]) * x.at(&[bi, grp * cin_g + ci, pos as usize]);
                            }
                        }
                    }
                    let o = out.offset(&[bi, co, t]);
                    out.data_mut()[o] = acc;
                }
            }
        }
        assert_eq!(cin, cin_g * g);
        out
    }

    #[test]
    fn identity_kernel_is_copy() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::ones(vec![1, 1, 1]));
        let y = x.conv1d(w, None, Conv1dSpec::default()).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, cout, k, s, d, g, pl, pr, len) in &[
            (4, 6, 3, 1, 1, 1, 1, 1, 9),
            (4, 8, 5, 2, 1, 4, 2, 2, 17),
            (6, 6, 3, 3, 2, 3, 0, 3, 20),
            (2, 3, 41, 4, 1, 1, 20, 20, 50),
        ] {
            let x = Tensor::randn(vec![2, cin, len], 1.0, &mut rng);
            let w = Tensor::randn(vec![cout, cin / g, k], 1.0, &mut rng);
            let b = Tensor::randn(vec![cout], 1.0, &mut rng);
            let tape = Tape::new();
            let spec = Conv1dSpec::default()
                .with_stride(s)
                .with_dilation(d)
                .with_groups(g)
                .with_padding(pl, pr);
            let y = tape
                .constant(x.clone())
                .conv1d(tape.constant(w.clone()), Some(tape.constant(b.clone())), spec)
                .unwrap()
                .to_tensor();
            let expect = conv_oracle(&x, &w, Some(&b), s, d, g, pl, y.shape()[2]);
            assert!(y.max_abs_diff(&expect) < 1e-10);
        }
    }

    #[test]
    fn depthwise_one_hot_kernel_shifts_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![1, 3, 10], 1.0, &mut rng);
        // tap 0 of a same-padded K=3 kernel reads position t - 1
        let mut w = Tensor::zeros(vec![3, 1, 3]);
        for c in 0..3 {
            let o = w.offset(&[c, 0, 0]);
            w.data_mut()[o] = 1.0;
        }
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv1d(tape.constant(w), None, Conv1dSpec::same().with_groups(3))
            .unwrap()
            .to_tensor();
        for c in 0..3 {
            assert_eq!(y.at(&[0, c, 0]), 0.0);
            for t in 1..10 {
                assert_eq!(y.at(&[0, c, t]), x.at(&[0, c, t - 1]));
            }
        }
    }

    #[test]
    fn transpose_conv_length_and_adjointness() {
        // <convT(x, w), y> == <x, conv(y, w')> where conv uses the same weights
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cin, cout, k, s, p) = (3, 2, 8, 4, 2);
        let x = Tensor::randn(vec![1, cin, 6], 1.0, &mut rng);
        let w = Tensor::randn(vec![cin, cout, k], 1.0, &mut rng);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv_transpose1d(tape.constant(w.clone()), None, s, p)
            .unwrap()
            .to_tensor();
        assert_eq!(y.shape(), &[1, cout, 5 * s + k - 2 * p]);
        let probe = Tensor::randn(y.shape().to_vec(), 1.0, &mut rng);
        // the conv with weights w (as Cout=cin, Cin=cout) is the adjoint
        let back = tape
            .constant(probe.clone())
            .conv1d(
                tape.constant(w.clone()),
                None,
                Conv1dSpec::default().with_stride(s).with_padding(p, p),
            )
            .unwrap()
            .to_tensor();
        let lhs = y.dot(&probe);
        let rhs: f64 = x.dot(&back.reshape(x.shape().to_vec()).unwrap());
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn avg_pool_counts_padding() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 4], vec![4.0, 4.0, 4.0, 4.0]).unwrap());
        let y = x.avg_pool1d(4, 2, 2).unwrap().to_tensor();
        assert_eq!(y.data(), &[2.0, 4.0, 2.0]);
    }

    #[test]
    fn same_padding_rejects_stride() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 8]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3]));
        assert!(x.conv1d(w, None, Conv1dSpec::same().with_stride(2)).is_err());
    }
}
