//! Self-checks shared by the command line and the test suites: finite
//! difference gradient suites, the optimized-vs-reference attention trials,
//! the unfold/fold adjoint trials and kernel range checks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::losses::{adv_d_loss, adv_g_loss, feature_matching_loss, mel_loss, total_g_loss, LossWeights};
use crate::tensor::{fold1d, grad_check, unfold1d, Conv1dSpec, PadMode, Tape, Tensor, Var};
use crate::wolo::{wolo_attention_reference, ActivationMode, WoloParams, WoloVars};

/// Largest acceptable relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Wolo,
    Losses,
    Dsp,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "tensor" => Ok(Suite::Tensor),
            "wolo" => Ok(Suite::Wolo),
            "losses" => Ok(Suite::Losses),
            "dsp" => Ok(Suite::Dsp),
            _ => Err(Error::invalid(
                "gradcheck",
                format!("unknown module {s:?}; expected all, tensor, wolo, losses or dsp"),
            )),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::All => "all",
            Suite::Tensor => "tensor",
            Suite::Wolo => "wolo",
            Suite::Losses => "losses",
            Suite::Dsp => "dsp",
        })
    }
}

/// One gradient check: its label and the largest relative error found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < GRAD_TOLERANCE
    }
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output entry carries a
/// distinct weight into the scalar being differentiated.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    Ok(y.mul(tape.constant(w))?.sum())
}

/// Entries with magnitude in `[0.2, 1.2)` and random sign, away from the
/// kinks of `abs`, `leaky_relu` and `clamp_min(0)`.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.2);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

type Unary = for<'t> fn(Var<'t>) -> Result<Var<'t>>;

fn tensor_suite(out: &mut Vec<GradCheck>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut push = |name: &str, error: f64| {
        out.push(GradCheck {
            name: format!("tensor/{name}"),
            error,
        })
    };

    let unary: [(&str, Unary, Tensor); 18] = [
        ("sin", |x| Ok(x.sin()), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        ("tanh", |x| Ok(x.tanh()), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        ("exp", |x| Ok(x.exp()), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        ("abs", |x| Ok(x.abs()), off_kink(&[3, 4], &mut rng)),
        ("square", |x| Ok(x.square()), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        ("neg", |x| Ok(x.neg()), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        ("scale", |x| Ok(x.scale(-2.5)), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        (
            "add_scalar",
            |x| Ok(x.add_scalar(0.7).square()),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
        ),
        ("leaky_relu", |x| Ok(x.leaky_relu(0.1)), off_kink(&[3, 4], &mut rng)),
        ("clamp_min", |x| Ok(x.clamp_min(0.0)), off_kink(&[3, 4], &mut rng)),
        ("log", |x| x.log(), Tensor::uniform(vec![3, 4], 0.5, 2.0, &mut rng)),
        (
            "sum",
            |x| Ok(x.square().sum()),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
        ),
        (
            "mean",
            |x| Ok(x.square().mean()),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
        ),
        (
            "sum_axis",
            |x| x.sum_axis(1),
            Tensor::randn(vec![2, 3, 4], 1.0, &mut rng),
        ),
        ("softmax", |x| x.softmax(1), Tensor::randn(vec![2, 5, 3], 1.0, &mut rng)),
        (
            "reshape",
            |x| x.reshape(vec![6, 2]),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
        ),
        (
            "permute",
            |x| x.permute(&[2, 0, 1]),
            Tensor::randn(vec![2, 3, 4], 1.0, &mut rng),
        ),
        (
            "transpose",
            |x| x.transpose(0, 2),
            Tensor::randn(vec![2, 3, 4], 1.0, &mut rng),
        ),
    ];
    for (i, (name, f, x)) in unary.into_iter().enumerate() {
        let err = grad_check(|tape, v| weighted(tape, f(v[0])?, i as u64), &[x], STEP)?;
        push(name, err);
    }

    let more: [(&str, Unary, Tensor); 9] = [
        (
            "slice",
            |x| x.slice(1, 1, 4),
            Tensor::randn(vec![2, 5, 3], 1.0, &mut rng),
        ),
        (
            "pad_zero",
            |x| x.pad(1, 2, 1, PadMode::Zero),
            Tensor::randn(vec![2, 4], 1.0, &mut rng),
        ),
        (
            "pad_reflect",
            |x| x.pad(1, 3, 2, PadMode::Reflect),
            Tensor::randn(vec![2, 6], 1.0, &mut rng),
        ),
        (
            "avg_pool1d",
            |x| x.avg_pool1d(4, 2, 2),
            Tensor::randn(vec![2, 3, 11], 1.0, &mut rng),
        ),
        (
            "unfold1d",
            |x| x.unfold1d(3, 2),
            Tensor::randn(vec![2, 3, 7], 1.0, &mut rng),
        ),
        (
            "fold1d",
            |x| x.fold1d(3, 2),
            Tensor::randn(vec![2, 7, 3, 3], 1.0, &mut rng),
        ),
        (
            "unfold1d_k5",
            |x| x.unfold1d(5, 1),
            Tensor::randn(vec![3, 6], 1.0, &mut rng),
        ),
        (
            "fold1d_k5",
            |x| x.fold1d(5, 3),
            Tensor::randn(vec![6, 5, 2], 1.0, &mut rng),
        ),
        (
            "softmax_last",
            |x| x.softmax(2),
            Tensor::randn(vec![2, 3, 4], 3.0, &mut rng),
        ),
    ];
    for (i, (name, f, x)) in more.into_iter().enumerate() {
        let err = grad_check(|tape, v| weighted(tape, f(v[0])?, 100 + i as u64), &[x], STEP)?;
        push(name, err);
    }

    type Binary = for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>;
    let binary: [(&str, Binary, Tensor, Tensor); 9] = [
        (
            "add",
            |a, b| a.add(b),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
            Tensor::randn(vec![4], 1.0, &mut rng),
        ),
        (
            "sub",
            |a, b| a.sub(b),
            Tensor::randn(vec![2, 3, 1], 1.0, &mut rng),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
        ),
        (
            "mul",
            |a, b| a.mul(b),
            Tensor::randn(vec![2, 3, 4], 1.0, &mut rng),
            Tensor::randn(vec![3, 1], 1.0, &mut rng),
        ),
        (
            "matmul",
            |a, b| a.matmul(b),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
            Tensor::randn(vec![4, 5], 1.0, &mut rng),
        ),
        (
            "matmul_batched_left",
            |a, b| a.matmul(b),
            Tensor::randn(vec![2, 3, 4], 1.0, &mut rng),
            Tensor::randn(vec![4, 5], 1.0, &mut rng),
        ),
        (
            "matmul_batched_right",
            |a, b| a.matmul(b),
            Tensor::randn(vec![3, 4], 1.0, &mut rng),
            Tensor::randn(vec![2, 4, 5], 1.0, &mut rng),
        ),
        (
            "matmul_batched",
            |a, b| a.matmul(b),
            Tensor::randn(vec![2, 3, 4], 1.0, &mut rng),
            Tensor::randn(vec![2, 4, 5], 1.0, &mut rng),
        ),
        (
            "concat",
            |a, b| Var::concat(&[a, b], 1),
            Tensor::randn(vec![2, 3], 1.0, &mut rng),
            Tensor::randn(vec![2, 2], 1.0, &mut rng),
        ),
        (
            "conv1d",
            |x, w| x.conv1d(w, None, Conv1dSpec::same()),
            Tensor::randn(vec![2, 3, 9], 1.0, &mut rng),
            Tensor::randn(vec![4, 3, 3], 1.0, &mut rng),
        ),
    ];
    for (i, (name, f, a, b)) in binary.into_iter().enumerate() {
        let err = grad_check(|tape, v| weighted(tape, f(v[0], v[1])?, 200 + i as u64), &[a, b], STEP)?;
        push(name, err);
    }

    let x = Tensor::randn(vec![2, 4, 13], 1.0, &mut rng);
    let w = Tensor::randn(vec![6, 2, 3], 1.0, &mut rng);
    let b = Tensor::randn(vec![6], 1.0, &mut rng);
    let spec = Conv1dSpec::default()
        .with_stride(2)
        .with_dilation(2)
        .with_groups(2)
        .with_padding(2, 1);
    let err = grad_check(
        |tape, v| weighted(tape, v[0].conv1d(v[1], Some(v[2]), spec)?, 300),
        &[x, w, b],
        STEP,
    )?;
    push("conv1d_strided_dilated_grouped", err);

    let x = Tensor::randn(vec![2, 3, 5], 1.0, &mut rng);
    let w = Tensor::randn(vec![3, 2, 5], 1.0, &mut rng);
    let b = Tensor::randn(vec![2], 1.0, &mut rng);
    let err = grad_check(
        |tape, v| weighted(tape, v[0].conv_transpose1d(v[1], Some(v[2]), 3, 1)?, 301),
        &[x, w, b],
        STEP,
    )?;
    push("conv_transpose1d", err);
    Ok(())
}

fn random_wolo(c: usize, k: usize, d: usize, mode: ActivationMode, rng: &mut ChaCha8Rng) -> Result<WoloParams> {
    let mut p = WoloParams::zeros(c, k, d, mode)?;
    p.u = Tensor::randn(p.u.shape().to_vec(), 0.7, rng);
    p.v = Tensor::randn(p.v.shape().to_vec(), 0.7, rng);
    p.post_w = Tensor::randn(vec![c, c], 0.5, rng);
    p.post_b = Tensor::randn(vec![c], 0.5, rng);
    Ok(p)
}

fn wolo_suite(out: &mut Vec<GradCheck>) -> Result<()> {
    const TARGETS: [&str; 5] = ["X", "U", "V", "post_w", "post_b"];
    for (m, mode) in ActivationMode::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + m as u64);
        let (c, t, k, d) = (3, 10, 3, 2);
        let p = random_wolo(c, k, d, mode, &mut rng)?;
        let x = Tensor::randn(vec![c, t], 1.0, &mut rng);
        let all = [x, p.u.clone(), p.v.clone(), p.post_w.clone(), p.post_b.clone()];
        for (target, label) in TARGETS.iter().enumerate() {
            let err = grad_check(
                |tape, v| {
                    let pick = |i: usize| {
                        if i == target {
                            v[0]
                        } else {
                            tape.constant(all[i].clone())
                        }
                    };
                    let vars = WoloVars {
                        u: pick(1),
                        v: pick(2),
                        post_w: pick(3),
                        post_b: pick(4),
                        kernel: k,
                        dilation: d,
                        mode,
                    };
                    weighted(tape, vars.block(pick(0))?, 400 + m as u64)
                },
                &[all[target].clone()],
                STEP,
            )?;
            out.push(GradCheck {
                name: format!("wolo/block[{mode}] wrt {label}"),
                error: err,
            });
        }

        let xb = Tensor::randn(vec![2, c, 6], 1.0, &mut rng);
        let err = grad_check(
            |tape, v| {
                let vars = WoloVars {
                    u: v[1],
                    v: v[2],
                    post_w: tape.constant(p.post_w.clone()),
                    post_b: tape.constant(p.post_b.clone()),
                    kernel: 5,
                    dilation: 1,
                    mode,
                };
                weighted(tape, vars.attention_composed(v[0])?, 410 + m as u64)
            },
            &[
                xb,
                Tensor::randn(vec![30, c], 0.7, &mut rng),
                Tensor::randn(vec![30], 0.7, &mut rng),
            ],
            STEP,
        )?;
        out.push(GradCheck {
            name: format!("wolo/attention_composed[{mode}]"),
            error: err,
        });
    }
    Ok(())
}

fn small_mel() -> Result<MelSpectrogram> {
    MelSpectrogram::new(MelConfig {
        sample_rate: 8000,
        n_fft: 64,
        hop: 16,
        win_length: 64,
        n_mels: 8,
        fmin: 0.0,
        fmax: 4000.0,
        log_floor: 1e-5,
    })
}

fn losses_suite(out: &mut Vec<GradCheck>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let shapes: [&[usize]; 3] = [&[2, 5], &[2, 7], &[2, 3]];
    let maps =
        |rng: &mut ChaCha8Rng| -> Vec<Tensor> { shapes.iter().map(|s| Tensor::randn(s.to_vec(), 1.0, rng)).collect() };
    let (real, fake) = (maps(&mut rng), maps(&mut rng));
    let n = real.len();
    let both: Vec<Tensor> = real.iter().chain(&fake).cloned().collect();
    let mut push = |name: &str, error: f64| {
        out.push(GradCheck {
            name: format!("losses/{name}"),
            error,
        })
    };
    push("adv_d", grad_check(|_, v| adv_d_loss(&v[..n], &v[n..]), &both, STEP)?);
    push("adv_g", grad_check(|_, v| adv_g_loss(&v[n..]), &both, STEP)?);
    push(
        "feature_matching",
        grad_check(
            |_, v| feature_matching_loss(&[v[..n].to_vec()], &[v[n..].to_vec()]),
            &both,
            STEP,
        )?,
    );
    let spec = small_mel()?;
    // a louder, slightly perturbed copy keeps every log-mel gap away from the kink of |.|
    let x = Tensor::randn(vec![2, 96], 0.3, &mut rng);
    let noise = Tensor::randn(vec![2, 96], 0.02, &mut rng);
    let xh = Tensor::new(
        vec![2, 96],
        x.data().iter().zip(noise.data()).map(|(a, n)| 1.7 * a + n).collect(),
    )?;
    push(
        "mel",
        grad_check(|_, v| mel_loss(v[0], v[1], &spec), &[x.clone(), xh.clone()], STEP)?,
    );

    let weights = LossWeights::default();
    let mut params = vec![xh];
    params.extend(fake);
    let err = grad_check(
        |tape, v| {
            let real_v: Vec<Var<'_>> = real.iter().map(|t| tape.constant(t.clone())).collect();
            let target = tape.constant(x.clone());
            let adv = adv_g_loss(&v[1..])?;
            let fm = feature_matching_loss(&[real_v], &[v[1..].to_vec()])?;
            let mel = mel_loss(target, v[0], &spec)?;
            total_g_loss(adv, fm, mel, &weights)
        },
        &params,
        STEP,
    )?;
    push("total_g", err);
    Ok(())
}

fn dsp_suite(out: &mut Vec<GradCheck>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let spec = small_mel()?;
    let x = Tensor::randn(vec![100], 0.3, &mut rng);
    let err = grad_check(|tape, v| weighted(tape, spec.forward(v[0])?, 600), &[x], STEP)?;
    out.push(GradCheck {
        name: "dsp/log_mel".into(),
        error: err,
    });
    let xb = Tensor::randn(vec![2, 80], 0.3, &mut rng);
    let err = grad_check(|tape, v| weighted(tape, spec.mel_energy(v[0])?, 601), &[xb], STEP)?;
    out.push(GradCheck {
        name: "dsp/mel_energy_batched".into(),
        error: err,
    });
    Ok(())
}

/// Runs the selected gradient suites.
pub fn gradient_suite(suite: Suite) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    if suite.includes(Suite::Tensor) {
        tensor_suite(&mut out)?;
    }
    if suite.includes(Suite::Wolo) {
        wolo_suite(&mut out)?;
    }
    if suite.includes(Suite::Losses) {
        losses_suite(&mut out)?;
    }
    if suite.includes(Suite::Dsp) {
        dsp_suite(&mut out)?;
    }
    Ok(out)
}

/// One optimized-vs-reference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTrial {
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub mode: ActivationMode,
    pub error: f64,
}

/// `trials` random instances (C ≤ 8, T ≤ 32, K ∈ {1,3,5}, d ∈ {1,2,3}),
/// each compared in every activation mode.
pub fn oracle_trials(trials: usize, seed: u64) -> Result<Vec<OracleTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials * 3);
    for _ in 0..trials {
        let channels = rng.random_range(1..=8);
        let len = rng.random_range(1..=32);
        let kernel = [1, 3, 5][rng.random_range(0..3)];
        let dilation = rng.random_range(1..=3);
        let x = Tensor::randn(vec![channels, len], 1.0, &mut rng);
        let base = random_wolo(channels, kernel, dilation, ActivationMode::Sine, &mut rng)?;
        for mode in ActivationMode::ALL {
            let params = WoloParams { mode, ..base.clone() };
            let tape = Tape::new();
            let fast = params
                .bind(&tape, false)
                .attention(tape.constant(x.clone()))?
                .to_tensor();
            let slow = wolo_attention_reference(&x, &params)?;
            out.push(OracleTrial {
                channels,
                len,
                kernel,
                dilation,
                mode,
                error: fast.max_abs_diff(&slow),
            });
        }
    }
    Ok(out)
}

/// Relative gaps `|<fold(A), X> - <A, unfold(X)>| / max(|lhs|, |rhs|)` over
/// random instances.
pub fn adjoint_trials(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let c = rng.random_range(1..=8);
            let t = rng.random_range(1..=32);
            let k = [1, 3, 5, 7][rng.random_range(0..4)];
            let d = rng.random_range(1..=4);
            let x = Tensor::randn(vec![c, t], 1.0, &mut rng);
            let a = Tensor::randn(vec![t, k, c], 1.0, &mut rng);
            let lhs = fold1d(&a, k, d)?.dot(&x);
            let rhs = a.dot(&unfold1d(&x, k, d)?);
            let scale = lhs.abs().max(rhs.abs());
            Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
        })
        .collect()
}

/// Range summary of activated kernels `(..., K, K)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelStats {
    pub min: f64,
    pub max: f64,
    /// Largest `|Σ_j W[q, j] - 1|` over all rows.
    pub row_sum_deviation: f64,
    pub all_finite: bool,
}

impl KernelStats {
    /// Whether the kernels satisfy the range property of `mode`: row
    /// stochastic for softmax, inside `[-1, 1]` for sine and tanh.
    pub fn satisfies(&self, mode: ActivationMode, row_tol: f64) -> bool {
        self.all_finite
            && match mode {
                ActivationMode::Softmax => self.min >= 0.0 && self.row_sum_deviation <= row_tol,
                ActivationMode::Sine | ActivationMode::Tanh => self.min >= -1.0 && self.max <= 1.0,
            }
    }
}

pub fn kernel_stats(kernels: &[Tensor]) -> Result<KernelStats> {
    let mut stats = KernelStats {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        row_sum_deviation: 0.0,
        all_finite: true,
    };
    for w in kernels {
        let k = *w
            .shape()
            .last()
            .ok_or_else(|| Error::shape("kernel_stats", &[w.shape()]))?;
        if k == 0 || w.len() % k != 0 {
            return Err(Error::shape("kernel_stats", &[w.shape()]));
        }
        stats.all_finite &= w.all_finite();
        for row in w.data().chunks(k) {
            for &v in row {
                stats.min = stats.min.min(v);
                stats.max = stats.max.max(v);
            }
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            stats.row_sum_deviation = stats.row_sum_deviation.max(dev);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in ["all", "tensor", "wolo", "losses", "dsp"] {
            assert_eq!(s.parse::<Suite>().unwrap().to_string(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn every_suite_passes() {
        let checks = gradient_suite(Suite::All).unwrap();
        assert!(checks.len() > 50);
        for c in &checks {
            assert!(c.passed(), "{}: {}", c.name, c.error);
        }
    }

    #[test]
    fn oracle_and_adjoint_trials_agree() {
        let trials = oracle_trials(20, 3).unwrap();
        assert_eq!(trials.len(), 60);
        assert!(trials.iter().all(|t| t.error < 1e-9));
        let gaps = adjoint_trials(30, 4).unwrap();
        assert!(gaps.iter().all(|g| *g < 1e-9));
    }

    #[test]
    fn kernel_stats_flags_ranges() {
        let soft = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let s = kernel_stats(&[soft]).unwrap();
        assert!(s.satisfies(ActivationMode::Softmax, 1e-12));
        let wide = Tensor::new(vec![1, 2], vec![1.5, -0.2]).unwrap();
        let s = kernel_stats(&[wide]).unwrap();
        assert!(!s.satisfies(ActivationMode::Sine, 1e-12));
        assert!(!s.satisfies(ActivationMode::Softmax, 1e-12));
        let s = kernel_stats(&[Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap()]).unwrap();
        assert!(!s.satisfies(ActivationMode::Tanh, 1e-12));
    }
}
