//! Wave Outlooker attention and the residual WOLO block.
//!
//! Every time step predicts its own `K x K` tap-mixing matrix and `K` biases
//! from the local feature vector. The matrix is applied identically to every
//! channel of the step's dilated neighbourhood, and the mixed windows are
//! overlap-added back onto the timeline. A pointwise convolution then mixes
//! channels.

mod fused;
mod reference;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use reference::wolo_attention_reference;

/// Slope of the LeakyReLU on both sides of the attention.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Standard deviation of the initial prediction and mixing weights.
pub const INIT_STD: f64 = 0.01;

/// Nonlinearity applied to the predicted kernel weights (never the biases).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationMode {
    #[default]
    Sine,
    Tanh,
    /// Normalises each output tap's weights over the input taps.
    Softmax,
}

impl ActivationMode {
    pub const ALL: [ActivationMode; 3] = [Self::Sine, Self::Tanh, Self::Softmax];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sine => "sine",
            Self::Tanh => "tanh",
            Self::Softmax => "softmax",
        }
    }
}

impl fmt::Display for ActivationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sine" | "sin" => Ok(Self::Sine),
            "tanh" => Ok(Self::Tanh),
            "softmax" => Ok(Self::Softmax),
            _ => Err(Error::invalid(
                "activation_mode",
                format!("unknown mode {s:?} (expected sine, tanh or softmax)"),
            )),
        }
    }
}

fn check_kernel(op: &'static str, kernel: usize, dilation: usize) -> Result<()> {
    if kernel.is_multiple_of(2) || dilation == 0 {
        return Err(Error::invalid(
            op,
            format!("kernel {kernel} must be odd and dilation {dilation} positive"),
        ));
    }
    Ok(())
}

/// Learnable weights of one WOLO block.
#[derive(Clone, Debug, PartialEq)]
pub struct WoloParams {
    /// `(K² + K, C)` kernel-prediction weights.
    pub u: Tensor,
    /// `(K² + K)` kernel-prediction bias.
    pub v: Tensor,
    /// `(C, C)` pointwise mixing weights.
    pub post_w: Tensor,
    /// `(C)` pointwise mixing bias.
    pub post_b: Tensor,
    pub kernel: usize,
    pub dilation: usize,
    pub mode: ActivationMode,
}

impl WoloParams {
    /// All-zero weights: the block is then an exact identity.
    pub fn zeros(channels: usize, kernel: usize, dilation: usize, mode: ActivationMode) -> Result<Self> {
        check_kernel("WoloParams", kernel, dilation)?;
        let rows = kernel * kernel + kernel;
        Ok(WoloParams {
            u: Tensor::zeros(vec![rows, channels]),
            v: Tensor::zeros(vec![rows]),
            post_w: Tensor::zeros(vec![channels, channels]),
            post_b: Tensor::zeros(vec![channels]),
            kernel,
            dilation,
            mode,
        })
    }

    /// `U` and the mixing weights drawn from `N(0, 0.01²)`, biases zero.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        kernel: usize,
        dilation: usize,
        mode: ActivationMode,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(channels, kernel, dilation, mode)?;
        p.u = Tensor::randn(p.u.shape().to_vec(), INIT_STD, rng);
        p.post_w = Tensor::randn(vec![channels, channels], INIT_STD, rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.post_b.len()
    }

    /// `(K² + K)(C + 1) + C² + C`.
    pub fn param_count(&self) -> usize {
        wolo_param_count(self.channels(), self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        check_kernel("WoloParams", self.kernel, self.dilation)?;
        let c = self.channels();
        let rows = self.kernel * self.kernel + self.kernel;
        if self.u.shape() != [rows, c]
            || self.v.shape() != [rows]
            || self.post_w.shape() != [c, c]
            || self.post_b.shape() != [c]
        {
            return Err(Error::shape(
                "WoloParams",
                &[self.u.shape(), self.v.shape(), self.post_w.shape(), self.post_b.shape()],
            ));
        }
        Ok(())
    }

    /// Places the weights on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> WoloVars<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        WoloVars {
            u: put(&self.u),
            v: put(&self.v),
            post_w: put(&self.post_w),
            post_b: put(&self.post_b),
            kernel: self.kernel,
            dilation: self.dilation,
            mode: self.mode,
        }
    }
}

/// Learnable scalars in one block with `channels` channels and kernel `kernel`.
pub fn wolo_param_count(channels: usize, kernel: usize) -> usize {
    (kernel * kernel + kernel) * (channels + 1) + channels * channels + channels
}

/// Per-step kernels after activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernels {
    /// `(T, K, K)`; rows are output taps, columns input taps.
    pub w: Tensor,
    /// `(T, K)`, never activated.
    pub b: Tensor,
}

/// WOLO weights living on a tape. Inputs may be `(C, T)` or batched
/// `(B, C, T)`.
#[derive(Clone, Copy, Debug)]
pub struct WoloVars<'t> {
    pub u: Var<'t>,
    pub v: Var<'t>,
    pub post_w: Var<'t>,
    pub post_b: Var<'t>,
    pub kernel: usize,
    pub dilation: usize,
    pub mode: ActivationMode,
}

/// Lifts `(C, T)` to `(1, C, T)`; the flag says whether to squeeze back.
fn batched<'t>(op: &'static str, x: Var<'t>) -> Result<(Var<'t>, bool)> {
    match x.shape().as_slice() {
        &[c, t] => Ok((x.reshape(vec![1, c, t])?, true)),
        [_, _, _] => Ok((x, false)),
        s => Err(Error::shape(op, &[s])),
    }
}

fn drop_batch(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(s[1..].to_vec())
}

impl<'t> WoloVars<'t> {
    fn check_shapes(&self, x: Var<'t>) -> Result<()> {
        let rows = self.kernel * self.kernel + self.kernel;
        let xs = x.shape();
        if self.u.shape() != [rows, xs[1]] || self.v.shape() != [rows] {
            return Err(Error::shape(
                "predict_kernels",
                &[&xs, &self.u.shape(), &self.v.shape()],
            ));
        }
        Ok(())
    }

    /// Raw kernels `(B, T, K, K)` and biases `(B, T, K)` from `U·x_t + V`.
    pub fn predict(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (x, _) = batched("predict_kernels", x)?;
        self.check_shapes(x)?;
        let k = self.kernel;
        let rows = k * k + k;
        let xs = x.shape();
        let (b, t) = (xs[0], xs[2]);
        let pred = self
            .u
            .matmul(x)?
            .add(self.v.reshape(vec![rows, 1])?)?
            .permute(&[0, 2, 1])?;
        let w_raw = pred.slice(2, 0, k * k)?.reshape(vec![b, t, k, k])?;
        let bias = pred.slice(2, k * k, rows)?;
        Ok((w_raw, bias))
    }

    /// Activated kernels `(B, T, K, K)` and biases `(B, T, K)`.
    pub fn kernels(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (w_raw, bias) = self.predict(x)?;
        Ok((activate(w_raw, self.mode)?, bias))
    }

    /// Neighbourhood mixing and overlap-add; `(B, C, T)` or `(C, T)` in and out.
    pub fn attention(&self, x: Var<'t>) -> Result<Var<'t>> {
        check_kernel("wolo_attention", self.kernel, self.dilation)?;
        let (xb, squeeze) = batched("wolo_attention", x)?;
        self.check_shapes(xb)?;
        let out = fused::fused_attention(xb, self.u, self.v, self.kernel, self.dilation, self.mode)?;
        if squeeze {
            drop_batch(out)
        } else {
            Ok(out)
        }
    }

    /// [`WoloVars::attention`] assembled from the individual tape ops:
    /// predict, activate, unfold, apply and fold.
    pub fn attention_composed(&self, x: Var<'t>) -> Result<Var<'t>> {
        check_kernel("wolo_attention", self.kernel, self.dilation)?;
        let (xb, squeeze) = batched("wolo_attention", x)?;
        let (w, bias) = self.kernels(xb)?;
        let windows = xb.unfold1d(self.kernel, self.dilation)?;
        let mixed = apply(w, bias, windows)?;
        let out = mixed.fold1d(self.kernel, self.dilation)?;
        if squeeze {
            drop_batch(out)
        } else {
            Ok(out)
        }
    }

    /// Pointwise channel mixing `post_w · x + post_b`.
    pub fn mix(&self, x: Var<'t>) -> Result<Var<'t>> {
        let c = self.post_b.shape()[0];
        self.post_w.matmul(x)?.add(self.post_b.reshape(vec![c, 1])?)
    }

    /// `x + mix(leaky(attention(leaky(x))))`.
    pub fn block(&self, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.attention(x.leaky_relu(LEAKY_SLOPE))?;
        x.add(self.mix(a.leaky_relu(LEAKY_SLOPE))?)
    }
}

/// Applies the kernel nonlinearity; softmax runs over the last (input-tap) axis.
pub fn activate<'t>(w_raw: Var<'t>, mode: ActivationMode) -> Result<Var<'t>> {
    match mode {
        ActivationMode::Sine => Ok(w_raw.sin()),
        ActivationMode::Tanh => Ok(w_raw.tanh()),
        ActivationMode::Softmax => w_raw.softmax(w_raw.shape().len() - 1),
    }
}

/// `Ŷ[t] = W[t]·Y[t] + b[t]` with the bias of output tap `q` broadcast over
/// channels. Shapes `(..., T, K, K)`, `(..., T, K)`, `(..., T, K, C)`.
pub fn apply<'t>(w: Var<'t>, b: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let (ws, bs, ys) = (w.shape(), b.shape(), y.shape());
    let err = || Error::shape("apply_dynamic_kernel", &[&ws, &bs, &ys]);
    let r = ys.len();
    if r < 3 || ws.len() != r || bs.len() != r - 1 {
        return Err(err());
    }
    let k = ys[r - 2];
    let c = ys[r - 1];
    let lead = &ys[..r - 2];
    if ws[r - 2..] != [k, k] || ws[..r - 2] != *lead || bs[r - 2] != k || bs[..r - 2] != *lead {
        return Err(err());
    }
    let steps: usize = lead.iter().product();
    let out = w
        .reshape(vec![steps, k, k])?
        .matmul(y.reshape(vec![steps, k, c])?)?
        .add(b.reshape(vec![steps, k, 1])?)?;
    out.reshape(ys)
}

fn run<T>(f: impl FnOnce(&Tape) -> Result<T>) -> Result<T> {
    f(&Tape::new())
}

/// Raw kernels `(T, K, K)` and biases `(T, K)` of `x: (C, T)`.
pub fn predict_kernels(x: &Tensor, u: &Tensor, v: &Tensor, kernel: usize) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 {
        return Err(Error::shape("predict_kernels", &[x.shape()]));
    }
    run(|tape| {
        let vars = WoloVars {
            u: tape.constant(u.clone()),
            v: tape.constant(v.clone()),
            post_w: tape.constant(Tensor::zeros(vec![0, 0])),
            post_b: tape.constant(Tensor::zeros(vec![0])),
            kernel,
            dilation: 1,
            mode: ActivationMode::Sine,
        };
        let (w, b) = vars.predict(tape.constant(x.clone()))?;
        Ok((drop_batch(w)?.to_tensor(), drop_batch(b)?.to_tensor()))
    })
}

pub fn activate_kernel(w_raw: &Tensor, mode: ActivationMode) -> Result<Tensor> {
    run(|tape| Ok(activate(tape.constant(w_raw.clone()), mode)?.to_tensor()))
}

/// Activated kernels for `x: (C, T)`.
pub fn dynamic_kernels(x: &Tensor, params: &WoloParams) -> Result<DynamicKernels> {
    let (w_raw, b) = predict_kernels(x, &params.u, &params.v, params.kernel)?;
    Ok(DynamicKernels {
        w: activate_kernel(&w_raw, params.mode)?,
        b,
    })
}

pub fn apply_dynamic_kernel(w: &Tensor, b: &Tensor, y: &Tensor) -> Result<Tensor> {
    run(|tape| {
        Ok(apply(
            tape.constant(w.clone()),
            tape.constant(b.clone()),
            tape.constant(y.clone()),
        )?
        .to_tensor())
    })
}

/// WOLO attention of `x: (C, T)`.
pub fn wolo_attention(x: &Tensor, params: &WoloParams) -> Result<Tensor> {
    params.validate()?;
    run(|tape| {
        Ok(params
            .bind(tape, false)
            .attention(tape.constant(x.clone()))?
            .to_tensor())
    })
}

/// Residual WOLO block on `x: (C, T)`.
pub fn wolo_block(x: &Tensor, params: &WoloParams) -> Result<Tensor> {
    params.validate()?;
    run(|tape| Ok(params.bind(tape, false).block(tape.constant(x.clone()))?.to_tensor()))
}
