//! Elementwise, reduction, matmul and layout primitives.

use std::rc::Rc;

use rayon::prelude::*;

use super::linalg::gemm;
use super::{axis_split, strides, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib, mut o) = (0, 0, 0);
    loop {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, &[a.shape(), b.shape()]))?;
        let n: usize = out_shape.iter().product();
        let apply = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let same = a.shape() == b.shape();
        let (sa, sb) = (
            broadcast_strides(a.shape(), &out_shape),
            broadcast_strides(b.shape(), &out_shape),
        );
        let data = if same {
            a.data().iter().zip(b.data()).map(|(&x, &y)| apply(x, y)).collect()
        } else {
            let mut data = vec![0.0; n];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = apply(ad[i], bd[j]));
            data
        };
        self.tape.count_madds(n as u64);
        let value = Tensor::from_parts(out_shape.clone(), data);
        Ok(self.tape.record(value, &[self, other], move |g, mask| {
            let gd = g.data();
            let mut ga = mask[0].then(|| vec![0.0; a.len()]);
            let mut gb = mask[1].then(|| vec![0.0; b.len()]);
            let (ad, bd) = (a.data(), b.data());
            let mut visit = |o: usize, i: usize, j: usize| {
                let (da, db) = match op {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (bd[j], ad[i]),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] += gd[o] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += gd[o] * db;
                }
            };
            if same {
                (0..gd.len()).for_each(|k| visit(k, k, k));
            } else {
                for_each_broadcast(&out_shape, &sa, &sb, visit);
            }
            vec![
                ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
            ]
        }))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_saved = Rc::clone(&y);
        self.tape.record(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `max(x, floor)`; gradient passes where `x >= floor`.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(move |x| x.max(floor), move |x, _| if x >= floor { 1.0 } else { 0.0 })
    }

    /// Natural log; rejects non-finite inputs and non-positive arguments.
    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..][..inner];
                for (dst, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let gd = g.data();
            let mut data = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    data[(o * n + k) * inner..][..inner].copy_from_slice(&gd[o * inner..][..inner]);
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), data))]
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - max).exp();
                    y[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    y[at(k)] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let y_saved = Rc::clone(&y);
        Ok(self.tape.record(y, &[self], move |g, _| {
            let (gd, yd) = (g.data(), y_saved.data());
            let mut dx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }

    /// Matrix product over the last two axes. Either operand may be 2-D
    /// (shared across the batch) or 3-D (batched).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let err = || Error::shape("matmul", &[a.shape(), b.shape()]);
        let (ra, rb) = (a.rank(), b.rank());
        if !(2..=3).contains(&ra) || !(2..=3).contains(&rb) {
            return Err(err());
        }
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_a = (ra == 3).then(|| a.shape()[0]);
        let batch_b = (rb == 3).then(|| b.shape()[0]);
        let batch = match (batch_a, batch_b) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (Some(x), _) | (None, Some(x)) => Some(x),
            (None, None) => None,
        };
        let nb = batch.unwrap_or(1);
        let step_a = if ra == 3 { m * k } else { 0 };
        let step_b = if rb == 3 { k * n } else { 0 };

        let mut out = vec![0.0; nb * m * n];
        let (ad, bd) = (a.data(), b.data());
        let per_item = |(bi, c): (usize, &mut [f64])| {
            gemm(
                false,
                false,
                m,
                n,
                k,
                1.0,
                &ad[bi * step_a..],
                &bd[bi * step_b..],
                0.0,
                c,
            );
        };
        if nb > 1 && m * n > 0 {
            out.par_chunks_mut(m * n)
                .enumerate()
                .with_min_len(64)
                .for_each(per_item);
        } else if m * n > 0 {
            out.chunks_mut(m * n).enumerate().for_each(per_item);
        }
        self.tape.count_madds((nb * m * n * k) as u64);

        let shape = match batch {
            Some(bs) => vec![bs, m, n],
            None => vec![m, n],
        };
        Ok(self
            .tape
            .record(Tensor::from_parts(shape, out), &[self, other], move |g, mask| {
                let gd = g.data();
                let (ad, bd) = (a.data(), b.data());
                let da = mask[0].then(|| {
                    let mut da = vec![0.0; a.len()];
                    if step_a > 0 {
                        da.par_chunks_mut(m * k)
                            .enumerate()
                            .with_min_len(64)
                            .for_each(|(bi, dst)| {
                                let gb = &gd[bi * m * n..];
                                gemm(false, true, m, k, n, 1.0, gb, &bd[bi * step_b..], 0.0, dst);
                            });
                    } else {
                        for bi in 0..nb {
                            let gb = &gd[bi * m * n..];
                            gemm(false, true, m, k, n, 1.0, gb, &bd[bi * step_b..], 1.0, &mut da);
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), da)
                });
                let db = mask[1].then(|| {
                    let mut db = vec![0.0; b.len()];
                    if step_b > 0 {
                        db.par_chunks_mut(k * n)
                            .enumerate()
                            .with_min_len(64)
                            .for_each(|(bi, dst)| {
                                let gb = &gd[bi * m * n..];
                                gemm(true, false, k, n, m, 1.0, &ad[bi * step_a..], gb, 0.0, dst);
                            });
                    } else {
                        for bi in 0..nb {
                            let gb = &gd[bi * m * n..];
                            gemm(true, false, k, n, m, 1.0, &ad[bi * step_a..], gb, 1.0, &mut db);
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), db)
                });
                vec![da, db]
            }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        let value = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("bad axes {axes:?} for rank {rank}")));
        }
        let value = permute_tensor(&x, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .tape
            .record(value, &[self], move |g, _| vec![Some(permute_tensor(g, &inverse))]))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if a >= rank || b >= rank {
            return Err(Error::invalid("transpose", format!("axes ({a}, {b}) for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Gathers along `axis`: output position `j` reads input `src[j]`, or zero.
    fn gather_axis(self, axis: usize, src: Vec<Option<usize>>) -> Var<'t> {
        let x = self.value();
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let m = src.len();
        let xd = x.data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for (j, s) in src.iter().enumerate() {
                if let Some(s) = *s {
                    out[(o * m + j) * inner..][..inner].copy_from_slice(&xd[(o * n + s) * inner..][..inner]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        let in_shape = x.shape().to_vec();
        self.tape.record(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for (j, s) in src.iter().enumerate() {
                    if let Some(s) = *s {
                        let dst = &mut dx[(o * n + s) * inner..][..inner];
                        for (d, v) in dst.iter_mut().zip(&gd[(o * m + j) * inner..][..inner]) {
                            *d += v;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        })
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        Ok(self.gather_axis(axis, (start..end).map(Some).collect()))
    }

    pub fn pad(self, axis: usize, left: usize, right: usize, mode: PadMode) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("pad", format!("axis {axis} for {shape:?}")));
        }
        let n = shape[axis];
        if mode == PadMode::Reflect && (left >= n || right >= n) {
            return Err(Error::invalid(
                "pad",
                format!("reflect padding ({left}, {right}) needs more than {n} samples"),
            ));
        }
        let src = (0..left + n + right)
            .map(|j| {
                if j >= left && j < left + n {
                    Some(j - left)
                } else if mode == PadMode::Zero {
                    None
                } else if j < left {
                    Some(left - j)
                } else {
                    Some(2 * n - 2 - (j - left))
                }
            })
            .collect();
        Ok(self.gather_axis(axis, src))
    }

    /// Joins `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &[&base, s]));
            }
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let mut at = 0;
            for (v, &len) in values.iter().zip(&lens) {
                out[(o * total + at) * inner..][..len * inner]
                    .copy_from_slice(&v.data()[o * len * inner..][..len * inner]);
                at += len;
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(tape.record(Tensor::from_parts(shape, out), parts, move |g, mask| {
            let gd = g.data();
            let mut at = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (p, &len) in lens.iter().enumerate() {
                if mask[p] {
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        d[o * len * inner..][..len * inner]
                            .copy_from_slice(&gd[(o * total + at) * inner..][..len * inner]);
                    }
                    let mut s = base.clone();
                    s[axis] = len;
                    grads.push(Some(Tensor::from_parts(s, d)));
                } else {
                    grads.push(None);
                }
                at += len;
            }
            grads
        }))
    }
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = xd[i]);
    Tensor::from_parts(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sin_exact_points() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, std::f64::consts::FRAC_PI_2]));
        let y = x.sin().to_tensor();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.0);
    }

    #[test]
    fn broadcast_bias_over_batch() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 3], &[0.0; 12]));
        let b = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let y = x.add(b).unwrap().to_tensor();
        assert_eq!(y.at(&[1, 0, 2]), 1.0);
        assert_eq!(y.at(&[1, 1, 0]), 2.0);
    }

    #[test]
    fn incompatible_shapes_name_the_op() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let y = tape.constant(Tensor::zeros(vec![4]));
        let err = x.add(y).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        let err = x.matmul(x).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn log_rejects_non_positive_and_non_finite() {
        let tape = Tape::new();
        assert!(tape.constant(Tensor::from_vec(vec![1.0, 0.0])).log().is_err());
        assert!(tape.constant(Tensor::from_vec(vec![f64::NAN])).log().is_err());
        assert!(tape.constant(Tensor::from_vec(vec![f64::INFINITY])).log().is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        let b = t(&[3, 4], &(0..12).map(|i| i as f64 * 0.25 - 1.0).collect::<Vec<_>>());
        let tape = Tape::new();
        let c = tape
            .constant(a.clone())
            .matmul(tape.constant(b.clone()))
            .unwrap()
            .to_tensor();
        assert_eq!(c.shape(), &[2, 4]);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|l| a.at(&[i, l]) * b.at(&[l, j])).sum();
                assert!((c.at(&[i, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let y = x.pad(0, 2, 2, PadMode::Reflect).unwrap().to_tensor();
        assert_eq!(y.data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
        assert!(x.pad(0, 4, 0, PadMode::Reflect).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 700.0]));
        let y = x.softmax(1).unwrap().to_tensor();
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let v = tape.constant(x.clone());
        let y = v.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        assert_eq!(y.value().at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = y.permute(&[1, 2, 0]).unwrap().to_tensor();
        assert_eq!(back, x);
    }

    #[test]
    fn reused_var_accumulates_gradient() {
        // f(x) = sum(x * x + x), df/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5, -2.0]));
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, -3.0]);
    }
}
