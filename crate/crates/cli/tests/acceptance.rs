//! Exit criteria for the vocoder, run in order with one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs everything (the convergence run takes
//! the better part of an hour on one core). Pass criterion numbers to run a
//! subset: `cargo test --test acceptance -- 1 2 9`.

use std::f64::consts::LN_10;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wolonet::dsp::{MelConfig, MelSpectrogram};
use wolonet::eval::{mcd, mcd_cepstra, mel_cepstrum, MCD_ORDER};
use wolonet::generator::{build_generator, GeneratorConfig};
use wolonet::trainer::{Dataset, RunConfig, StepLog, Trainer};
use wolonet::verify::{adjoint_trials, gradient_suite, oracle_trials, Suite, GRAD_TOLERANCE};
use wolonet::wolo::{wolo_attention, wolo_block, ActivationMode, WoloParams};
use wolonet::Tensor;

const SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Result<Verdict, Box<dyn std::error::Error>>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    check: Check,
}

fn criteria() -> Vec<Criterion> {
    let secs = Duration::from_secs;
    vec![
        Criterion {
            id: 1,
            name: "madds parity",
            budget: secs(1),
            check: madds_parity,
        },
        Criterion {
            id: 2,
            name: "oracle equivalence",
            budget: secs(30),
            check: oracle_equivalence,
        },
        Criterion {
            id: 3,
            name: "gradient correctness",
            budget: secs(300),
            check: gradient_correctness,
        },
        Criterion {
            id: 4,
            name: "adjoint identity",
            budget: secs(10),
            check: adjoint_identity,
        },
        Criterion {
            id: 5,
            name: "shape and locality contracts",
            budget: secs(60),
            check: shape_contracts,
        },
        Criterion {
            id: 6,
            name: "parameter count",
            budget: secs(10),
            check: parameter_count,
        },
        Criterion {
            id: 7,
            name: "desk-scale convergence",
            budget: secs(3600),
            check: convergence,
        },
        Criterion {
            id: 8,
            name: "activation ablation",
            budget: secs(900),
            check: ablation,
        },
        Criterion {
            id: 9,
            name: "mel cepstral distortion",
            budget: secs(5),
            check: mcd_metric,
        },
        Criterion {
            id: 10,
            name: "determinism and checkpointing",
            budget: secs(120),
            check: determinism,
        },
    ]
}

fn wolonet_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wolonet"))
}

fn madds_parity() -> Result<Verdict, Box<dyn std::error::Error>> {
    let out = wolonet_bin()
        .args(["verify-madds", "--C", "512", "--K", "5"])
        .output()?;
    let text = String::from_utf8(out.stdout)?;
    let field = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
            .map(|v| v.split_whitespace().next().unwrap_or_default().to_string())
            .unwrap_or_default()
    };
    let wolo: u64 = field("wolo_madds").parse()?;
    let resblock: u64 = field("resblock_madds").parse()?;
    let ratio: f64 = field("ratio").parse()?;
    let pass = out.status.success() && wolo == 293376 && resblock == 1310720 && (ratio - 4.468).abs() <= 1e-3;
    Ok(Verdict::new(
        pass,
        format!("wolo={wolo} resblock={resblock} ratio={ratio:.6} exit={}", out.status),
    ))
}

fn oracle_equivalence() -> Result<Verdict, Box<dyn std::error::Error>> {
    let trials = oracle_trials(100, SEED)?;
    let mut detail = Vec::new();
    let mut pass = trials.len() == 300;
    for mode in ActivationMode::ALL {
        let worst = trials
            .iter()
            .filter(|t| t.mode == mode)
            .map(|t| t.error)
            .fold(0.0, f64::max);
        pass &= worst <= 1e-9;
        detail.push(format!("{mode} max_abs={worst:.3e}"));
    }
    Ok(Verdict::new(
        pass,
        format!("{} instances; {}", trials.len() / 3, detail.join(" ")),
    ))
}

fn gradient_correctness() -> Result<Verdict, Box<dyn std::error::Error>> {
    let checks = gradient_suite(Suite::All)?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.error.total_cmp(&b.error))
        .ok_or("empty suite")?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let groups = ["tensor/", "wolo/block", "losses/", "dsp/log_mel"];
    let covered = groups.iter().all(|g| checks.iter().any(|c| c.name.starts_with(g)));
    let wrt = ["X", "U", "V", "post_w", "post_b"];
    let block_covered = wrt.iter().all(|w| {
        checks
            .iter()
            .any(|c| c.name.starts_with("wolo/block") && c.name.ends_with(&format!("wrt {w}")))
    });
    Ok(Verdict::new(
        failed.is_empty() && covered && block_covered && worst.error < GRAD_TOLERANCE,
        format!(
            "{} checks, max rel error {:.3e} ({}); failing: {:?}",
            checks.len(),
            worst.error,
            worst.name,
            failed
        ),
    ))
}

fn adjoint_identity() -> Result<Verdict, Box<dyn std::error::Error>> {
    let gaps = adjoint_trials(100, SEED)?;
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    Ok(Verdict::new(
        gaps.len() == 100 && worst <= 1e-9,
        format!("100 instances, max relative gap {worst:.3e}"),
    ))
}

fn random_block(
    channels: usize,
    kernel: usize,
    dilation: usize,
    mode: ActivationMode,
    rng: &mut ChaCha8Rng,
) -> WoloParams {
    let mut p = WoloParams::zeros(channels, kernel, dilation, mode).unwrap();
    p.u = Tensor::randn(p.u.shape().to_vec(), 1.0, rng);
    p.v = Tensor::randn(p.v.shape().to_vec(), 1.0, rng);
    p.post_w = Tensor::randn(p.post_w.shape().to_vec(), 1.0, rng);
    p.post_b = Tensor::randn(p.post_b.shape().to_vec(), 1.0, rng);
    p
}

/// Largest `|t - s|` at which perturbing input column `s` changes output
/// column `t`, over every `s`.
fn reach(
    x: &Tensor,
    params: &WoloParams,
    f: fn(&Tensor, &WoloParams) -> wolonet::Result<Tensor>,
) -> wolonet::Result<usize> {
    let &[c, t] = x.shape() else { unreachable!() };
    let base = f(x, params)?;
    let mut reach = 0;
    for s in 0..t {
        let mut bumped = x.clone();
        for ch in 0..c {
            bumped.data_mut()[ch * t + s] += 0.5;
        }
        let out = f(&bumped, params)?;
        for pos in 0..t {
            if (0..c).any(|ch| out.at(&[ch, pos]) != base.at(&[ch, pos])) {
                reach = reach.max(pos.abs_diff(s));
            }
        }
    }
    Ok(reach)
}

fn shape_contracts() -> Result<Verdict, Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let generator = build_generator(&GeneratorConfig::default(), SEED)?;
    let mut pass = true;
    let mut lengths = Vec::new();
    for frames in [1usize, 8, 32, 64] {
        let mel = Tensor::randn(vec![80, frames], 1.0, &mut rng);
        let wave = generator.synthesize(&mel)?;
        pass &= wave.len() == 256 * frames && wave.samples.iter().all(|v| v.abs() < 1.0);
        lengths.push(format!("{frames}->{}", wave.len()));
    }

    let mut shapes_ok = true;
    let mut locality_ok = true;
    for kernel in [1usize, 3, 5] {
        for dilation in [1usize, 2, 3] {
            let mode = ActivationMode::ALL[rng.random_range(0..3)];
            let channels = rng.random_range(1..=6);
            let len = 4 * (kernel / 2) * dilation + 5;
            let params = random_block(channels, kernel, dilation, mode, &mut rng);
            let x = Tensor::randn(vec![channels, len], 1.0, &mut rng);
            shapes_ok &= wolo_block(&x, &params)?.shape() == x.shape();
            shapes_ok &= wolo_attention(&x, &params)?.shape() == x.shape();
            let radius = 2 * (kernel / 2) * dilation;
            locality_ok &= reach(&x, &params, wolo_attention)? == radius;
            locality_ok &= reach(&x, &params, wolo_block)? == radius;
        }
    }
    pass &= shapes_ok && locality_ok;
    Ok(Verdict::new(
        pass,
        format!(
            "frames->samples {}; block shape preserved={shapes_ok}; reach equals 2*floor(K/2)*d={locality_ok}",
            lengths.join(" ")
        ),
    ))
}

fn parameter_count() -> Result<Verdict, Box<dyn std::error::Error>> {
    const REPORTED: f64 = 9.09e6;
    let count = build_generator(&GeneratorConfig::default(), SEED)?.param_count();
    let gap = count as f64 / REPORTED - 1.0;
    Ok(Verdict::new(
        gap.abs() <= 0.2,
        format!("param_count={count} reported=9.09M relative gap {gap:+.4} (band +-0.20)"),
    ))
}

fn all_finite(steps: &[StepLog]) -> bool {
    steps.iter().all(|s| {
        [s.loss_d, s.loss_g, s.loss_mel, s.loss_fm, s.loss_adv]
            .iter()
            .all(|v| v.is_finite())
    })
}

fn convergence() -> Result<Verdict, Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::desk();
    cfg.train.total_steps = 2000;
    cfg.train.seed = SEED;
    cfg.train.checkpoint_every = 0;
    cfg.train.validation_every = 10;
    assert_eq!(cfg.generator.base_channels, 32);
    assert_eq!(cfg.generator.upsample_strides, [8, 8, 2, 2]);
    assert_eq!(cfg.generator.wolo_kernel, 3);
    assert_eq!(cfg.train.batch_size, 4);

    let data = Dataset::synthetic(64, SEED, 22050, 1.0);
    let mut trainer = Trainer::new(cfg, data)?;
    let report = trainer.run(None)?;
    let window: Vec<f64> = report
        .validation
        .iter()
        .filter(|(s, _)| (51..=100).contains(s))
        .map(|v| v.1)
        .collect();
    let early = window.iter().sum::<f64>() / window.len() as f64;
    let last = report
        .validation
        .iter()
        .find(|(s, _)| *s == 2000)
        .map(|v| v.1)
        .ok_or("no validation at step 2000")?;
    let finite = all_finite(&report.steps) && report.validation.iter().all(|v| v.1.is_finite());
    Ok(Verdict::new(
        finite && window.len() == 5 && last < 0.6 * early,
        format!(
            "val mel-L1 step 2000 = {last:.4}, step-100 moving average = {early:.4} (limit {:.4}), finite={finite}",
            0.6 * early
        ),
    ))
}

fn ablation() -> Result<Verdict, Box<dyn std::error::Error>> {
    let out = wolonet_bin()
        .args(["ablate", "--mode", "all", "--steps", "200"])
        .output()?;
    let text = String::from_utf8(out.stdout)?;
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut pass = out.status.success() && rows.len() == 3;
    let mut detail = Vec::new();
    for row in &rows {
        let [mode, steps, _, _, _, min, max, dev, status] = row[..] else {
            return Err(format!("malformed ablate row {row:?}").into());
        };
        let (min, max, dev): (f64, f64, f64) = (min.parse()?, max.parse()?, dev.parse()?);
        let range_ok = match mode {
            "softmax" => min >= 0.0 && dev <= 1e-12,
            _ => min >= -1.0 && max <= 1.0,
        };
        pass &= steps == "200" && status == "ok" && range_ok;
        detail.push(format!(
            "{mode}: steps={steps} kernels [{min:.3}, {max:.3}] row dev {dev:.1e} {status}"
        ));
    }
    Ok(Verdict::new(pass, detail.join("; ")))
}

fn mcd_metric() -> Result<Verdict, Box<dyn std::error::Error>> {
    let cfg = MelConfig::default();
    let data = Dataset::synthetic(2, SEED, 22050, 1.0);
    let (a, b) = (&data.clips[0], &data.clips[1]);
    let self_distance = mcd(a, a, &cfg)?;
    let (ab, ba) = (mcd(a, b, &cfg)?, mcd(b, a, &cfg)?);

    let spec = MelSpectrogram::new(cfg)?;
    let ca = mel_cepstrum(&spec.compute(a)?, MCD_ORDER)?;
    let mut worst: f64 = 0.0;
    for (coef, delta) in [(0usize, 0.5), (6, -1.75), (12, 1e-3)] {
        let mut cb = ca.clone();
        for row in cb.data_mut().chunks_mut(MCD_ORDER) {
            row[coef] += delta;
        }
        let want = 10.0 / LN_10 * 2f64.sqrt() * f64::abs(delta);
        worst = worst.max((mcd_cepstra(&ca, &cb)? - want).abs());
    }
    Ok(Verdict::new(
        self_distance == 0.0 && ab == ba && ab > 0.0 && worst <= 1e-9,
        format!("mcd(a,a)={self_distance} mcd(a,b)={ab:.6} mcd(b,a)={ba:.6} single-coefficient error {worst:.2e}"),
    ))
}

fn bits(steps: &[StepLog]) -> Vec<[u64; 6]> {
    steps
        .iter()
        .map(|s| {
            [
                s.step,
                s.loss_d.to_bits(),
                s.loss_g.to_bits(),
                s.loss_mel.to_bits(),
                s.loss_fm.to_bits(),
                s.loss_adv.to_bits(),
            ]
        })
        .collect()
}

fn determinism() -> Result<Verdict, Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::desk();
    cfg.train.total_steps = 20;
    cfg.train.seed = SEED;
    cfg.train.checkpoint_every = 0;
    cfg.train.validation_every = 0;
    let data = Dataset::synthetic(16, SEED, 22050, 1.0);
    let dir = tempfile::tempdir()?;

    let mid = dir.path().join("step10.wolo");
    let mut continuous = Trainer::new(cfg.clone(), data.clone())?;
    let mut full = continuous.run_until(10, None)?;
    continuous.save_checkpoint(&mid)?;
    full.steps.extend(continuous.run(None)?.steps);

    let mut resumed = Trainer::new(cfg.clone(), data.clone())?;
    resumed.load_checkpoint(&mid)?;
    let tail = resumed.run(None)?;
    let joined: Vec<StepLog> = full.steps[..10].iter().chain(&tail.steps).copied().collect();
    let traces_identical = full.steps.len() == 20 && tail.steps.len() == 10 && bits(&joined) == bits(&full.steps);

    let end = dir.path().join("step20.wolo");
    continuous.save_checkpoint(&end)?;
    let mut reloaded = Trainer::new(cfg, data)?;
    reloaded.load_checkpoint(&end)?;
    let state_exact = reloaded.state() == continuous.state() && resumed.state() == continuous.state();
    let again = dir.path().join("again.wolo");
    reloaded.save_checkpoint(&again)?;
    let bytes_exact = std::fs::read(&end)? == std::fs::read(&again)?;

    Ok(Verdict::new(
        traces_identical && state_exact && bytes_exact,
        format!("20-step traces bit-identical={traces_identical}; round trip state exact={state_exact}, bytes exact={bytes_exact}"),
    ))
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = Vec::new();
    for c in criteria() {
        if !wanted.is_empty() && !wanted.contains(&c.id) {
            continue;
        }
        let start = Instant::now();
        let verdict = match (c.check)() {
            Ok(v) => v,
            Err(e) => Verdict::new(false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = verdict.pass && in_time;
        println!(
            "criterion {:>2} {:<30} {}  {} [{:.2}s of {}s{}]",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
        if !pass {
            failures.push(c.id);
        }
    }
    if !failures.is_empty() {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
