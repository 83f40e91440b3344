//! Least-squares adversarial, feature-matching and mel reconstruction losses.

use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fm: 2.0,
            lambda_mel: 45.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0 && self.lambda_mel >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn sum_all<'t>(op: &'static str, terms: impl IntoIterator<Item = Result<Var<'t>>>) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for t in terms {
        let t = t?;
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::invalid(op, "no score maps"))
}

/// `Σ_k mean((real_k - 1)²) + mean(fake_k²)`.
pub fn adv_d_loss<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<Var<'t>> {
    if real.len() != fake.len() {
        return Err(Error::invalid(
            "adv_d_loss",
            format!("{} real vs {} fake score maps", real.len(), fake.len()),
        ));
    }
    sum_all(
        "adv_d_loss",
        real.iter().zip(fake).map(|(&r, &f)| {
            let real_term = r.add_scalar(-1.0).square().mean();
            real_term.add(f.square().mean())
        }),
    )
}

/// `Σ_k mean((1 - fake_k)²)`.
pub fn adv_g_loss<'t>(fake: &[Var<'t>]) -> Result<Var<'t>> {
    sum_all(
        "adv_g_loss",
        fake.iter().map(|&f| Ok(f.add_scalar(-1.0).square().mean())),
    )
}

/// `Σ_k Σ_i mean|real_ki - fake_ki|`.
pub fn feature_matching_loss<'t>(real: &[Vec<Var<'t>>], fake: &[Vec<Var<'t>>]) -> Result<Var<'t>> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(r, f)| r.len() != f.len()) {
        return Err(Error::invalid(
            "feature_matching_loss",
            "feature lists are not congruent",
        ));
    }
    sum_all(
        "feature_matching_loss",
        real.iter()
            .zip(fake)
            .flat_map(|(r, f)| r.iter().zip(f))
            .map(|(&r, &f)| {
                if r.shape() != f.shape() {
                    return Err(Error::shape("feature_matching_loss", &[&r.shape(), &f.shape()]));
                }
                Ok(r.sub(f)?.abs().mean())
            }),
    )
}

/// Mean absolute difference of the log-mel spectrograms of `x` and `x_hat`.
pub fn mel_loss<'t>(x: Var<'t>, x_hat: Var<'t>, mel: &MelSpectrogram) -> Result<Var<'t>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("mel_loss", &[&x.shape(), &x_hat.shape()]));
    }
    mel_loss_to(mel.forward(x)?, x_hat, mel)
}

/// [`mel_loss`] against an already computed target log-mel.
pub fn mel_loss_to<'t>(target: Var<'t>, x_hat: Var<'t>, mel: &MelSpectrogram) -> Result<Var<'t>> {
    let pred = mel.forward(x_hat)?;
    if pred.shape() != target.shape() {
        return Err(Error::shape("mel_loss", &[&target.shape(), &pred.shape()]));
    }
    Ok(target.sub(pred)?.abs().mean())
}

/// `adv + λ_fm·fm + λ_mel·mel`.
pub fn total_g_loss<'t>(adv: Var<'t>, fm: Var<'t>, mel: Var<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    adv.add(fm.scale(weights.lambda_fm))?.add(mel.scale(weights.lambda_mel))
}

/// The discriminator objective is the adversarial term alone.
pub fn total_d_loss<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<Var<'t>> {
    adv_d_loss(real, fake)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelConfig;
    use crate::tensor::{grad_check, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            Tensor::randn(vec![2, 5], 1.0, rng),
            Tensor::randn(vec![2, 7], 1.0, rng),
            Tensor::randn(vec![2, 3], 1.0, rng),
        ]
    }

    fn consts<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
        ts.iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn mean_of(t: &Tensor, f: impl Fn(f64) -> f64) -> f64 {
        t.data().iter().map(|&v| f(v)).sum::<f64>() / t.len() as f64
    }

    #[test]
    fn adversarial_optima_and_extremes() {
        let tape = Tape::new();
        let ones = consts(&tape, &vec![Tensor::ones(vec![3]); 8]);
        let zeros = consts(&tape, &vec![Tensor::zeros(vec![3]); 8]);
        assert_eq!(adv_d_loss(&ones, &zeros).unwrap().value().item(), 0.0);
        assert_eq!(adv_d_loss(&zeros, &ones).unwrap().value().item(), 16.0);
        assert_eq!(adv_g_loss(&ones).unwrap().value().item(), 0.0);
        assert_eq!(adv_g_loss(&zeros).unwrap().value().item(), 8.0);
        assert!(adv_d_loss(&[], &[]).is_err());
        assert!(adv_g_loss(&[]).is_err());
        assert!(adv_d_loss(&ones, &zeros[..3]).is_err());
    }

    #[test]
    fn lsgan_fixed_point_values() {
        let tape = Tape::new();
        let half = consts(&tape, &vec![Tensor::full(vec![4], 0.5); 8]);
        assert_eq!(adv_d_loss(&half, &half).unwrap().value().item(), 4.0);
        assert_eq!(adv_g_loss(&half).unwrap().value().item(), 2.0);
    }

    #[test]
    fn adversarial_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (real, fake) = (maps(&mut rng), maps(&mut rng));
        let tape = Tape::new();
        let d = adv_d_loss(&consts(&tape, &real), &consts(&tape, &fake))
            .unwrap()
            .value()
            .item();
        let g = adv_g_loss(&consts(&tape, &fake)).unwrap().value().item();
        let d_want: f64 = real
            .iter()
            .zip(&fake)
            .map(|(r, f)| mean_of(r, |v| (v - 1.0).powi(2)) + mean_of(f, |v| v * v))
            .sum();
        let g_want: f64 = fake.iter().map(|f| mean_of(f, |v| (1.0 - v).powi(2))).sum();
        assert!((d - d_want).abs() < 1e-12);
        assert!((g - g_want).abs() < 1e-12);
    }

    #[test]
    fn feature_matching_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = vec![maps(&mut rng), maps(&mut rng)];
        let tape = Tape::new();
        let rv: Vec<_> = real.iter().map(|m| consts(&tape, m)).collect();
        assert_eq!(feature_matching_loss(&rv, &rv).unwrap().value().item(), 0.0);

        let mut shifted = real.clone();
        shifted[1][2] = shifted[1][2].map(|v| v - 0.25);
        let sv: Vec<_> = shifted.iter().map(|m| consts(&tape, m)).collect();
        let fm = feature_matching_loss(&rv, &sv).unwrap().value().item();
        assert!((fm - 0.25).abs() < 1e-15);

        let fake = [maps(&mut rng), maps(&mut rng)];
        let fv: Vec<_> = fake.iter().map(|m| consts(&tape, m)).collect();
        let want: f64 = real
            .iter()
            .flatten()
            .zip(fake.iter().flatten())
            .map(|(r, f)| r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.len() as f64)
            .sum();
        assert!((feature_matching_loss(&rv, &fv).unwrap().value().item() - want).abs() < 1e-12);
        assert!(feature_matching_loss(&rv, &fv[..1]).is_err());
    }

    fn small_mel() -> MelSpectrogram {
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
        .unwrap()
    }

    #[test]
    fn mel_loss_cases() {
        let spec = small_mel();
        let tone: Vec<f64> = (0..256).map(|n| 0.5 * (n as f64 * 0.3).sin()).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(tone.clone()));
        assert_eq!(mel_loss(x, x, &spec).unwrap().value().item(), 0.0);
        let z = tape.constant(Tensor::zeros(vec![256]));
        let l = mel_loss(x, z, &spec).unwrap().value().item();
        assert!(l > 0.0);

        let a = spec.compute(&crate::dsp::Waveform::new(tone, 8000)).unwrap();
        let want = mean_of(&a, |v| (v - 1e-5f64.ln()).abs());
        assert!((l - want).abs() < 1e-12);
        assert!(mel_loss(x, tape.constant(Tensor::zeros(vec![255])), &spec).is_err());
    }

    #[test]
    fn weighted_totals() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let w = LossWeights::default();
        assert_eq!(total_g_loss(s(0.0), s(0.0), s(0.0), &w).unwrap().value().item(), 0.0);
        assert_eq!(total_g_loss(s(0.0), s(0.0), s(1.0), &w).unwrap().value().item(), 45.0);
        let (a, f, m) = (0.3, 1.7, 0.21);
        let got = total_g_loss(s(a), s(f), s(m), &w).unwrap().value().item();
        assert!((got - (a + 2.0 * f + 45.0 * m)).abs() < 1e-12);
        assert!(LossWeights {
            lambda_fm: -1.0,
            lambda_mel: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = maps(&mut rng);
        let fake = maps(&mut rng);
        let n = real.len();
        let params: Vec<Tensor> = real.iter().chain(&fake).cloned().collect();
        let d = grad_check(|_, v| adv_d_loss(&v[..n], &v[n..]), &params, 1e-5).unwrap();
        let g = grad_check(|_, v| adv_g_loss(&v[n..]), &params, 1e-5).unwrap();
        let fm = grad_check(
            |_, v| feature_matching_loss(&[v[..n].to_vec()], &[v[n..].to_vec()]),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(d < 1e-4 && g < 1e-4 && fm < 1e-4, "{d} {g} {fm}");

        let spec = small_mel();
        let x = Tensor::randn(vec![1, 128], 0.3, &mut rng);
        let xh = Tensor::randn(vec![1, 128], 0.3, &mut rng);
        let mel = grad_check(|_, v| mel_loss(v[0], v[1], &spec), &[x, xh], 1e-5).unwrap();
        assert!(mel < 1e-4, "{mel}");
    }
}
