//! Alternating least-squares GAN training: a discriminator update on detached
//! generator output, then a generator update against the refreshed
//! discriminator, both with Adam and a step-halving learning rate.

mod adam;
mod data;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use crate::discriminator::{build_discriminators, DiscriminatorBank, DiscriminatorConfig, SubOutput};
use crate::dsp::{save_mel, save_wav, MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::generator::{build_generator, Generator, GeneratorConfig};
use crate::losses::{adv_g_loss, feature_matching_loss, mel_loss_to, total_d_loss, total_g_loss, LossWeights};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{collate, sample_segment, Dataset, Segment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_halve_every: u64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub segment_samples: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Steps between full-state checkpoints (0 disables).
    pub checkpoint_every: u64,
    /// Steps between validation passes (0 disables).
    pub validation_every: u64,
    /// Clips held out of training for validation.
    pub validation_clips: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            lr_halve_every: 1000,
            adam: AdamConfig::default(),
            batch_size: 16,
            segment_samples: 8192,
            total_steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            validation_every: 10,
            validation_clips: 4,
            loss: LossWeights::default(),
        }
    }
}

/// Everything a training run needs, as read from a JSON config file. Every
/// section and field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub mel: MelConfig,
}

impl RunConfig {
    /// Small generator and narrow discriminators, batch 4: the configuration
    /// for CPU runs.
    pub fn desk() -> Self {
        RunConfig {
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
            mel: MelConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.loss.validate()?;
        let t = &self.train;
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if t.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if t.segment_samples == 0 || !t.segment_samples.is_multiple_of(self.mel.hop) {
            return fail(format!(
                "segment_samples {} must be a positive multiple of the hop {}",
                t.segment_samples, self.mel.hop
            ));
        }
        if t.segment_samples < self.mel.win_length.max(self.discriminator.min_len()) {
            return fail(format!("segment_samples {} is too short", t.segment_samples));
        }
        if t.lr.is_nan() || t.lr <= 0.0 || t.lr_halve_every == 0 {
            return fail("lr and lr_halve_every must be positive".into());
        }
        if self.generator.hop != self.mel.hop || self.generator.mel_bins != self.mel.n_mels {
            return fail(format!(
                "generator (hop {}, {} bins) does not match the mel frontend (hop {}, {} bins)",
                self.generator.hop, self.generator.mel_bins, self.mel.hop, self.mel.n_mels
            ));
        }
        Ok(())
    }
}

/// `lr0 * 2^-(step / halve_every)` with integer division.
pub fn learning_rate(lr0: f64, halve_every: u64, step: u64) -> f64 {
    let halvings = (step / halve_every.max(1)).min(i32::MAX as u64) as i32;
    lr0 * 0.5f64.powi(halvings)
}

/// Losses of one completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_d: f64,
    /// Weighted generator total.
    pub loss_g: f64,
    pub loss_mel: f64,
    pub loss_fm: f64,
    pub loss_adv: f64,
    pub lr: f64,
}

/// Generator-side loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLosses {
    pub total: f64,
    pub adv: f64,
    pub fm: f64,
    pub mel: f64,
}

/// A collated training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(B, n_mels, F)`.
    pub mel: Tensor,
    /// `(B, F * hop)`.
    pub wave: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// `(step, validation mel L1)`.
    pub validation: Vec<(u64, f64)>,
}

/// Deterministic per-step stream, so a resumed run draws the same batches.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn scores<'t>(outs: &[SubOutput<'t>]) -> Vec<Var<'t>> {
    outs.iter().map(|o| o.score).collect()
}

fn features<'t>(outs: &[SubOutput<'t>]) -> Vec<Vec<Var<'t>>> {
    outs.iter().map(|o| o.features.clone()).collect()
}

pub struct Trainer {
    cfg: RunConfig,
    mel: MelSpectrogram,
    generator: Generator,
    discriminators: DiscriminatorBank,
    adam_g: AdamState,
    adam_d: AdamState,
    step: u64,
    train: Dataset,
    validation: Option<Batch>,
    dump_dir: Option<PathBuf>,
}

const STEP_KEY: &str = "trainer.step";

impl Trainer {
    /// Builds fresh networks from the seed; the last `validation_clips` clips
    /// of `data` are held out.
    pub fn new(cfg: RunConfig, mut data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let held = data.split_off(cfg.train.validation_clips.min(data.len().saturating_sub(1)));
        if data.is_empty() {
            return Err(Error::Dataset("no training clips".into()));
        }
        let mel = MelSpectrogram::new(cfg.mel.clone())?;
        let generator = build_generator(&cfg.generator, cfg.train.seed)?;
        let discriminators = build_discriminators(&cfg.discriminator, cfg.train.seed.wrapping_add(1))?;
        let validation = Self::validation_batch(&held, &mel, cfg.train.segment_samples)?;
        Ok(Trainer {
            adam_g: AdamState::new(generator.params().tensors()),
            adam_d: AdamState::new(discriminators.params().tensors()),
            cfg,
            mel,
            generator,
            discriminators,
            step: 0,
            train: data,
            validation,
            dump_dir: None,
        })
    }

    /// The opening segment of every held-out clip long enough to provide one.
    fn validation_batch(held: &Dataset, mel: &MelSpectrogram, samples: usize) -> Result<Option<Batch>> {
        let segments = held
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.len() >= samples)
            .map(|(i, c)| {
                let crop = Waveform::new(c.samples[..samples].to_vec(), c.sample_rate);
                Ok(Segment {
                    mel: mel.compute(&crop)?,
                    wave: Tensor::from_vec(crop.samples),
                    clip: i,
                    offset: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if segments.is_empty() {
            return Ok(None);
        }
        let (mel, wave) = collate(&segments)?;
        Ok(Some(Batch { mel, wave }))
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminators(&self) -> &DiscriminatorBank {
        &self.discriminators
    }

    pub fn adam_states(&self) -> (&AdamState, &AdamState) {
        (&self.adam_g, &self.adam_d)
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        learning_rate(self.cfg.train.lr, self.cfg.train.lr_halve_every, step)
    }

    /// Directory that receives the offending batch if a loss goes non-finite.
    pub fn set_dump_dir(&mut self, dir: Option<PathBuf>) {
        self.dump_dir = dir;
    }

    /// The batch drawn for `step` (1-based); depends only on seed and step.
    pub fn batch_for(&self, step: u64) -> Result<Batch> {
        let mut rng = step_rng(self.cfg.train.seed, step);
        let segments = (0..self.cfg.train.batch_size)
            .map(|_| sample_segment(&self.train, &self.mel, self.cfg.train.segment_samples, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (mel, wave) = collate(&segments)?;
        Ok(Batch { mel, wave })
    }

    fn diverged(&self, step: u64, what: &str, value: f64, batch: &Batch) -> Error {
        let mut detail = format!("{what} = {value}");
        if let Some(dir) = &self.dump_dir {
            match self.dump_batch(dir, step, batch) {
                Ok(path) => detail.push_str(&format!("; batch written to {}", path.display())),
                Err(e) => detail.push_str(&format!("; batch dump failed: {e}")),
            }
        }
        log::error!("step {step}: {detail}");
        Error::Diverged { step, detail }
    }

    fn dump_batch(&self, dir: &Path, step: u64, batch: &Batch) -> Result<PathBuf> {
        let path = dir.join(format!("diverged_step{step}"));
        std::fs::create_dir_all(&path)?;
        let (b, m, f) = (batch.mel.shape()[0], batch.mel.shape()[1], batch.mel.shape()[2]);
        let l = batch.wave.shape()[1];
        for i in 0..b {
            let mel = Tensor::new(vec![m, f], batch.mel.data()[i * m * f..][..m * f].to_vec())?;
            save_mel(path.join(format!("item{i}.mel")), &mel)?;
            let wave = Waveform::new(batch.wave.data()[i * l..][..l].to_vec(), self.cfg.mel.sample_rate);
            save_wav(path.join(format!("item{i}.wav")), &wave)?;
        }
        Ok(path)
    }

    /// One discriminator update on `batch`; returns its loss.
    pub fn discriminator_step(&mut self, batch: &Batch, step: u64, lr: f64) -> Result<f64> {
        let tape = Tape::new();
        let gb = self.generator.params().bind(&tape, false);
        let fake = self.generator.forward(&gb, tape.constant(batch.mel.clone()))?;
        let db = self.discriminators.params().bind(&tape, true);
        let real_out = self
            .discriminators
            .discriminate(&db, tape.constant(batch.wave.clone()))?;
        let fake_out = self.discriminators.discriminate(&db, fake.detach())?;
        let loss = total_d_loss(&scores(&real_out), &scores(&fake_out))?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(self.diverged(step, "loss_d", value, batch));
        }
        let grads = db.grads(&tape.backward(loss)?);
        adam_step(
            self.discriminators.params_mut().tensors_mut(),
            &grads,
            &mut self.adam_d,
            lr,
            &self.cfg.train.adam,
        )?;
        Ok(value)
    }

    /// One generator update on `batch` against the current discriminators.
    pub fn generator_step(&mut self, batch: &Batch, step: u64, lr: f64) -> Result<GeneratorLosses> {
        let tape = Tape::new();
        let gb = self.generator.params().bind(&tape, true);
        let target = tape.constant(batch.mel.clone());
        let fake = self.generator.forward(&gb, target)?;
        let db = self.discriminators.params().bind(&tape, false);
        let real_out = self
            .discriminators
            .discriminate(&db, tape.constant(batch.wave.clone()))?;
        let fake_out = self.discriminators.discriminate(&db, fake)?;
        let adv = adv_g_loss(&scores(&fake_out))?;
        let fm = feature_matching_loss(&features(&real_out), &features(&fake_out))?;
        let mel = mel_loss_to(target, fake, &self.mel)?;
        let total = total_g_loss(adv, fm, mel, &self.cfg.train.loss)?;
        let losses = GeneratorLosses {
            total: total.value().item(),
            adv: adv.value().item(),
            fm: fm.value().item(),
            mel: mel.value().item(),
        };
        for (what, v) in [
            ("loss_g", losses.total),
            ("loss_mel", losses.mel),
            ("loss_fm", losses.fm),
        ] {
            if !v.is_finite() {
                return Err(self.diverged(step, what, v, batch));
            }
        }
        let grads = gb.grads(&tape.backward(total)?);
        adam_step(
            self.generator.params_mut().tensors_mut(),
            &grads,
            &mut self.adam_g,
            lr,
            &self.cfg.train.adam,
        )?;
        Ok(losses)
    }

    /// Runs the next step: discriminator update, then generator update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let lr = self.lr_at(step);
        let batch = self.batch_for(step)?;
        let loss_d = self.discriminator_step(&batch, step, lr)?;
        let g = self.generator_step(&batch, step, lr)?;
        self.step = step;
        Ok(StepLog {
            step,
            loss_d,
            loss_g: g.total,
            loss_mel: g.mel,
            loss_fm: g.fm,
            loss_adv: g.adv,
            lr,
        })
    }

    /// Mean mel L1 between held-out segments and their resynthesis.
    pub fn validate(&self) -> Result<Option<f64>> {
        let Some(batch) = &self.validation else {
            return Ok(None);
        };
        let tape = Tape::new();
        let gb = self.generator.params().bind(&tape, false);
        let target = tape.constant(batch.mel.clone());
        let fake = self.generator.forward(&gb, target)?;
        Ok(Some(mel_loss_to(target, fake, &self.mel)?.value().item()))
    }

    /// Held-out mel spectrograms `(B, n_mels, F)`, if any.
    pub fn validation_mels(&self) -> Option<&Tensor> {
        self.validation.as_ref().map(|b| &b.mel)
    }

    /// Every tensor needed to resume: both networks, both optimizers and the
    /// step counter.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let scalar = |v: u64| Tensor::scalar(v as f64);
        out.push((STEP_KEY.to_string(), scalar(self.step)));
        for (tag, store, adam) in [
            ("gen", self.generator.params(), &self.adam_g),
            ("disc", self.discriminators.params(), &self.adam_d),
        ] {
            for (name, t) in store.iter() {
                out.push((name.to_string(), t.clone()));
            }
            out.push((format!("adam.{tag}.step"), scalar(adam.step)));
            out.push((format!("adam.{tag}.skipped"), scalar(adam.skipped)));
            for (i, (name, _)) in store.iter().enumerate() {
                out.push((format!("adam.{tag}.m.{name}"), adam.m[i].clone()));
                out.push((format!("adam.{tag}.v.{name}"), adam.v[i].clone()));
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let state = self.state();
        save_checkpoint(path, state.iter().map(|(n, t)| (n.as_str(), t)), Precision::F64)
    }

    /// Restores a state written by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let store = load_checkpoint(path)?;
        self.restore(&store)
    }

    pub fn restore(&mut self, store: &ParamStore) -> Result<()> {
        let count = |name: &str| -> Result<u64> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            Ok(store.get(id).data().first().copied().unwrap_or(0.0) as u64)
        };
        self.generator.load_params(store)?;
        self.discriminators.load_params(store)?;
        for (tag, params, adam) in [
            ("gen", self.generator.params(), &mut self.adam_g),
            ("disc", self.discriminators.params(), &mut self.adam_d),
        ] {
            adam.step = count(&format!("adam.{tag}.step"))?;
            adam.skipped = count(&format!("adam.{tag}.skipped"))?;
            for (i, (name, t)) in params.iter().enumerate() {
                for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                    let key = format!("adam.{tag}.{kind}.{name}");
                    let id = store
                        .id(&key)
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks {key}")))?;
                    let value = store.get(id);
                    if value.shape() != t.shape() {
                        return Err(Error::shape("load_checkpoint", &[value.shape(), t.shape()]));
                    }
                    *slot = value.clone();
                }
            }
        }
        self.step = count(STEP_KEY)?;
        Ok(())
    }

    /// Trains until `total_steps`. With `out`, writes `metrics.csv`,
    /// `validation.csv`, periodic `ckpt_<step>.wolo` and `last.wolo`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainReport> {
        let total = self.cfg.train.total_steps;
        self.run_until(total, out)
    }

    pub fn run_until(&mut self, last_step: u64, out: Option<&Path>) -> Result<TrainReport> {
        let mut metrics = None;
        let mut validation_log = None;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            self.dump_dir.get_or_insert_with(|| dir.to_path_buf());
            metrics = Some(csv_appender(
                &dir.join("metrics.csv"),
                "step,loss_d,loss_g,loss_mel,loss_fm,lr",
            )?);
            validation_log = Some(csv_appender(&dir.join("validation.csv"), "step,val_mel_l1")?);
        }
        let mut report = TrainReport::default();
        let t = self.cfg.train.clone();
        while self.step < last_step {
            let log = self.train_step()?;
            if let Some(w) = metrics.as_mut() {
                writeln!(
                    w,
                    "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                    log.step, log.loss_d, log.loss_g, log.loss_mel, log.loss_fm, log.lr
                )?;
            }
            if t.validation_every > 0 && log.step % t.validation_every == 0 {
                if let Some(v) = self.validate()? {
                    report.validation.push((log.step, v));
                    if let Some(w) = validation_log.as_mut() {
                        writeln!(w, "{},{:.10e}", log.step, v)?;
                    }
                    log::info!(
                        "step {} loss_d {:.4} loss_g {:.4} mel {:.4} val_mel {:.4}",
                        log.step,
                        log.loss_d,
                        log.loss_g,
                        log.loss_mel,
                        v
                    );
                }
            }
            if let Some(dir) = out {
                if t.checkpoint_every > 0 && log.step % t.checkpoint_every == 0 {
                    self.save_checkpoint(dir.join(format!("ckpt_{:06}.wolo", log.step)))?;
                }
            }
            report.steps.push(log);
        }
        if let Some(dir) = out {
            for w in [metrics.as_mut(), validation_log.as_mut()].into_iter().flatten() {
                w.flush()?;
            }
            self.save_checkpoint(dir.join("last.wolo"))?;
        }
        Ok(report)
    }
}

/// Opens `path` for appending, writing `header` first if the file is new.
fn csv_appender(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}
