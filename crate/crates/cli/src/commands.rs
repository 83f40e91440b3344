use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use wolonet::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use wolonet::dsp::{load_mel, load_wav, log_mel, save_mel, save_wav, MelConfig};
use wolonet::eval::{self, MAddsReport};
use wolonet::generator::{build_generator, GeneratorConfig};
use wolonet::trainer::{Dataset, RunConfig, Trainer};
use wolonet::verify::{self, Suite, GRAD_TOLERANCE};
use wolonet::wolo::ActivationMode;
use wolonet::Error;

use crate::{AblateArgs, Command, DataArgs, Outcome, TrainArgs};

/// Published generator size the full configuration is compared against.
const REFERENCE_PARAMS: f64 = 9.09e6;
const PARAM_BAND: f64 = 0.2;
const PUBLISHED_WOLO: u64 = 293376;
const PUBLISHED_RESBLOCK: u64 = 1310720;
const PUBLISHED_RATIO: f64 = 4.468;
const SYNTHETIC_SECONDS: f64 = 1.0;

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::ExtractMel { input, out, config } => extract_mel(&input, &out, config.as_deref()),
        Command::Train(args) => train(args),
        Command::Synth { ckpt, mel, out, config } => synth(&ckpt, &mel, &out, config.as_deref()),
        Command::Gradcheck { module } => gradcheck(module.parse()?),
        Command::VerifyMadds {
            channels,
            kernel,
            grid,
            format,
        } => verify_madds(channels, kernel, grid, &format),
        Command::OracleCheck { trials, seed, tol } => oracle_check(trials, seed, tol),
        Command::Mcd {
            reference,
            synthesized,
            config,
        } => mcd(&reference, &synthesized, config.as_deref()),
        Command::Ablate(args) => ablate(args),
        Command::ParamCount { config } => param_count(config.as_deref()),
    }
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(fallback),
    }
}

fn mel_config(path: Option<&Path>) -> Result<MelConfig> {
    Ok(load_config(path, RunConfig::default())?.mel)
}

fn extract_mel(input: &Path, out: &Path, config: Option<&Path>) -> Result<Outcome> {
    let cfg = mel_config(config)?;
    let wave = load_wav(input).with_context(|| format!("reading {}", input.display()))?;
    ensure!(
        wave.sample_rate == cfg.sample_rate,
        "{} is sampled at {} Hz but the mel config expects {} Hz",
        input.display(),
        wave.sample_rate,
        cfg.sample_rate
    );
    let mel = log_mel(&wave, &cfg)?;
    save_mel(out, &mel)?;
    println!("frames {}", mel.shape()[1]);
    println!("mels {}", mel.shape()[0]);
    Ok(Outcome::Pass)
}

fn dataset(args: &DataArgs, seed: u64, sample_rate: u32) -> Result<Dataset> {
    match (&args.data, args.synthetic) {
        (Some(dir), None) => Ok(Dataset::from_dir(dir)?),
        (None, Some(n)) => Ok(Dataset::synthetic(n, seed, sample_rate, SYNTHETIC_SECONDS)),
        _ => bail!("exactly one of --data or --synthetic is required"),
    }
}

fn train(args: TrainArgs) -> Result<Outcome> {
    let mut cfg = load_config(args.config.as_deref(), RunConfig::desk())?;
    if let Some(s) = args.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    let data = dataset(&args.data, cfg.train.seed, cfg.mel.sample_rate)?;
    std::fs::create_dir_all(&args.out)?;
    cfg.save(args.out.join("config.json"))?;

    let mut trainer = Trainer::new(cfg, data)?;
    if let Some(ckpt) = &args.resume {
        trainer
            .load_checkpoint(ckpt)
            .with_context(|| format!("resuming from {}", ckpt.display()))?;
        println!("resumed_at {}", trainer.step());
    }
    let report = trainer.run(Some(&args.out))?;
    let generator = trainer.generator();
    save_checkpoint(
        args.out.join("generator.wolo"),
        generator.params().iter(),
        Precision::F32,
    )?;

    println!("steps {}", trainer.step());
    if let Some(last) = report.steps.last() {
        println!("loss_d {:.6e}", last.loss_d);
        println!("loss_g {:.6e}", last.loss_g);
        println!("loss_mel {:.6e}", last.loss_mel);
    }
    if let Some((step, v)) = report.validation.last() {
        println!("val_mel_l1 {v:.6e} (step {step})");
    }
    println!("params {}", generator.param_count());
    Ok(Outcome::Pass)
}

/// Generator config for a checkpoint: explicit file, else `config.json`
/// next to the checkpoint, else the defaults.
fn synth_config(ckpt: &Path, config: Option<&Path>) -> Result<RunConfig> {
    let sibling = ckpt.parent().map(|d| d.join("config.json"));
    match (config, sibling) {
        (Some(p), _) => load_config(Some(p), RunConfig::default()),
        (None, Some(s)) if s.exists() => load_config(Some(&s), RunConfig::default()),
        _ => Ok(RunConfig::default()),
    }
}

fn synth(ckpt: &Path, mel_path: &Path, out: &Path, config: Option<&Path>) -> Result<Outcome> {
    let cfg = synth_config(ckpt, config)?;
    let mut generator = build_generator(&cfg.generator, 0)?;
    let store = load_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    generator.load_params(&store)?;
    let mel = load_mel(mel_path).with_context(|| format!("reading {}", mel_path.display()))?;
    ensure!(
        mel.shape()[0] == cfg.generator.mel_bins,
        "{} has {} mel bins, the generator expects {}",
        mel_path.display(),
        mel.shape()[0],
        cfg.generator.mel_bins
    );
    let wave = generator.synthesize(&mel)?;
    save_wav(out, &wave)?;
    println!("frames {}", mel.shape()[1]);
    println!("samples {}", wave.len());
    Ok(Outcome::Pass)
}

fn gradcheck(suite: Suite) -> Result<Outcome> {
    let checks = verify::gradient_suite(suite)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut worst = 0.0f64;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:.6e}  {status}", c.name, c.error);
        worst = worst.max(c.error);
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("checks {}", checks.len());
    println!("max_rel_error {worst:.6e}");
    println!("tolerance {GRAD_TOLERANCE:.6e}");
    Ok(if failed == 0 {
        Outcome::Pass
    } else {
        eprintln!("{failed} gradient checks exceeded the tolerance");
        Outcome::ToleranceFailed
    })
}

fn verify_madds(channels: u64, kernel: u64, grid: bool, format: &str) -> Result<Outcome> {
    let report = MAddsReport::new(channels, kernel)?.measured()?;
    let mut ok = report.empirical_agrees() == Some(true);
    let empirical = report.empirical.unwrap_or_default();
    println!("C {channels}");
    println!("K {kernel}");
    println!("wolo_madds {}", report.wolo_madds);
    println!("resblock_madds {}", report.resblock_madds);
    println!("resblock_madds_with_bias {}", report.resblock_with_bias);
    println!("ratio {:.6}", report.ratio);
    println!("ratio_3dp {:.3}", report.ratio);
    println!(
        "empirical_madds {empirical} (slack {})",
        eval::madds_slack(channels, kernel)
    );
    if (channels, kernel) == (512, 5) {
        let parity = report.wolo_madds == PUBLISHED_WOLO
            && report.resblock_madds == PUBLISHED_RESBLOCK
            && (report.ratio - PUBLISHED_RATIO).abs() <= 1e-3;
        println!("published_parity {}", if parity { "ok" } else { "MISMATCH" });
        ok &= parity;
    }
    if grid {
        let rows = eval::madds_table(&[8, 64, 512], &[1, 3, 5])?
            .into_iter()
            .map(MAddsReport::measured)
            .collect::<wolonet::Result<Vec<_>>>()?;
        ok &= rows.iter().all(|r| r.empirical_agrees() == Some(true));
        match format {
            "csv" => print!("{}", eval::render_csv(&rows)),
            _ => print!("{}", eval::render_markdown(&rows)),
        }
    } else if format != "text" {
        let rows = [report];
        match format {
            "csv" => print!("{}", eval::render_csv(&rows)),
            _ => print!("{}", eval::render_markdown(&rows)),
        }
    }
    Ok(if ok { Outcome::Pass } else { Outcome::ToleranceFailed })
}

fn oracle_check(trials: usize, seed: u64, tol: f64) -> Result<Outcome> {
    let results = verify::oracle_trials(trials, seed)?;
    let worst = results.iter().max_by(|a, b| a.error.total_cmp(&b.error));
    let max = worst.map_or(0.0, |w| w.error);
    println!("instances {trials}");
    println!("comparisons {}", results.len());
    println!("max_abs_error {max:.6e}");
    if let Some(w) = worst {
        println!(
            "worst C={} T={} K={} d={} mode={}",
            w.channels, w.len, w.kernel, w.dilation, w.mode
        );
    }
    Ok(if max <= tol {
        Outcome::Pass
    } else {
        Outcome::ToleranceFailed
    })
}

fn mcd(reference: &Path, synthesized: &Path, config: Option<&Path>) -> Result<Outcome> {
    let cfg = mel_config(config)?;
    let a = load_wav(reference).with_context(|| format!("reading {}", reference.display()))?;
    let b = load_wav(synthesized).with_context(|| format!("reading {}", synthesized.display()))?;
    ensure!(
        a.sample_rate == b.sample_rate && a.sample_rate == cfg.sample_rate,
        "sample rates differ: {} Hz, {} Hz, config {} Hz",
        a.sample_rate,
        b.sample_rate,
        cfg.sample_rate
    );
    println!("mcd_db {:.6}", eval::mcd(&a, &b, &cfg)?);
    Ok(Outcome::Pass)
}

/// Row-sum tolerance for softmax kernels.
const ROW_TOLERANCE: f64 = 1e-12;
const ABLATE_CLIPS: usize = 16;

fn ablate(args: AblateArgs) -> Result<Outcome> {
    let base = load_config(args.config.as_deref(), RunConfig::desk())?;
    let modes: Vec<ActivationMode> = match args.mode.as_str() {
        "all" => ActivationMode::ALL.to_vec(),
        m => vec![m.parse()?],
    };
    let seed = args.seed.unwrap_or(base.train.seed);
    let data_args = if args.data.data.is_none() && args.data.synthetic.is_none() {
        DataArgs {
            data: None,
            synthetic: Some(ABLATE_CLIPS),
        }
    } else {
        args.data
    };
    let data = dataset(&data_args, seed, base.mel.sample_rate)?;

    let mut all_ok = true;
    println!("mode,steps,loss_g,loss_mel,val_mel_l1,kernel_min,kernel_max,row_sum_dev,status");
    for mode in modes {
        let mut cfg = base.clone();
        cfg.generator.activation = mode;
        cfg.train.total_steps = args.steps;
        cfg.train.seed = seed;
        cfg.train.validation_every = 0;
        cfg.train.checkpoint_every = 0;
        let out: Option<PathBuf> = args.out.as_ref().map(|d| d.join(mode.as_str()));
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            cfg.save(dir.join("config.json"))?;
        }
        let mut trainer = Trainer::new(cfg, data.clone())?;
        let report = match trainer.run(out.as_deref()) {
            Ok(r) => r,
            Err(Error::Diverged { step, detail }) => {
                println!("{mode},{step},nan,nan,nan,nan,nan,nan,DIVERGED");
                eprintln!("{mode}: diverged at step {step}: {detail}");
                all_ok = false;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let probe = match trainer.validation_mels() {
            Some(m) => m.clone(),
            None => trainer.batch_for(0)?.mel,
        };
        let stats = verify::kernel_stats(&trainer.generator().probe_kernels(&probe)?)?;
        let val = trainer.validate()?.unwrap_or(f64::NAN);
        let last = report.steps.last();
        let finite = report
            .steps
            .iter()
            .all(|s| s.loss_d.is_finite() && s.loss_g.is_finite());
        let ok = finite && stats.satisfies(mode, ROW_TOLERANCE);
        all_ok &= ok;
        println!(
            "{mode},{},{:.6e},{:.6e},{val:.6e},{:.6e},{:.6e},{:.6e},{}",
            trainer.step(),
            last.map_or(f64::NAN, |s| s.loss_g),
            last.map_or(f64::NAN, |s| s.loss_mel),
            stats.min,
            stats.max,
            stats.row_sum_deviation,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if all_ok {
        Outcome::Pass
    } else {
        Outcome::ToleranceFailed
    })
}

fn param_count(config: Option<&Path>) -> Result<Outcome> {
    let generator_cfg: GeneratorConfig = load_config(config, RunConfig::default())?.generator;
    let count = build_generator(&generator_cfg, 0)?.param_count();
    let gap = count as f64 / REFERENCE_PARAMS - 1.0;
    let ok = gap.abs() <= PARAM_BAND;
    println!("param_count {count}");
    println!("reference {REFERENCE_PARAMS:.0}");
    println!("relative_gap {gap:+.6}");
    println!("band {PARAM_BAND:.6}");
    println!("within_band {}", if ok { "yes" } else { "no" });
    Ok(if ok { Outcome::Pass } else { Outcome::ToleranceFailed })
}
