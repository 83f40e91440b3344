use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?.value();
    if out.len() != 1 {
        return Err(Error::shape("grad_check", &[out.shape()]));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

fn check_entries<F>(f: &F, params: &[Tensor], h: f64, entries: &[(usize, usize)]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        if !out.value().all_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
    };

    let errors: Vec<f64> = entries
        .par_iter()
        .map(|&(i, j)| {
            let theta = params[i].data()[j];
            let step = h * theta.abs().max(1.0);
            let mut probe = params.to_vec();
            probe[i].data_mut()[j] = theta + step;
            let plus = evaluate(f, &probe)?;
            probe[i].data_mut()[j] = theta - step;
            let minus = evaluate(f, &probe)?;
            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[i].data()[j];
            let scale = exact.abs().max(numeric.abs()).max(1e-8);
            Ok((exact - numeric).abs() / scale)
        })
        .collect::<Result<_>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// Largest relative error between tape gradients of the scalar function `f`
/// and central differences over every entry of every parameter.
///
/// Each entry is stepped by `h * max(1, |theta|)`; the relative error of an
/// entry is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    check_entries(&f, params, h, &entries)
}

/// [`grad_check`] over at most `per_param` randomly chosen entries of each
/// parameter, for functions too expensive to difference exhaustively.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], h: f64, per_param: usize, seed: u64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let n = p.len();
        let picked = sample(&mut rng, n, per_param.min(n));
        entries.extend(picked.into_iter().map(|j| (i, j)));
    }
    check_entries(&f, params, h, &entries)
}
