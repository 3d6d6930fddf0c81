//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Which parameter entries to perturb.
#[derive(Clone, Debug)]
pub enum Entries {
    /// Every entry of every non-frozen parameter.
    All,
    /// Up to `per_param` distinct entries of each non-frozen parameter,
    /// drawn deterministically from `seed`.
    Sample { per_param: usize, seed: u64 },
    /// An explicit list of `(parameter, flat index)` pairs.
    Explicit(Vec<(ParamId, usize)>),
}

impl Entries {
    pub fn resolve(&self, params: &ParamSet) -> Vec<(ParamId, usize)> {
        match self {
            Entries::All => params
                .ids()
                .filter(|&id| !params.get(id).frozen)
                .flat_map(|id| (0..params.value(id).len()).map(move |j| (id, j)))
                .collect(),
            Entries::Sample { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out = Vec::new();
                for id in params.ids().filter(|&id| !params.get(id).frozen) {
                    let n = params.value(id).len();
                    let mut picks = sample(&mut rng, n, (*per_param).min(n)).into_vec();
                    picks.sort_unstable();
                    out.extend(picks.into_iter().map(|j| (id, j)));
                }
                out
            }
            Entries::Explicit(v) => v.clone(),
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares tape gradients of `loss_fn` against central differences with the
/// given `step`.
///
/// `loss_fn` receives an eval-mode tape and must return a scalar. It is
/// evaluated twice at the unperturbed point first; differing results are
/// reported as an error. Existing gradients are zeroed.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    mut loss_fn: F,
    step: f64,
    entries: &Entries,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let f0 = eval(params, &mut loss_fn)?;
    let f1 = eval(params, &mut loss_fn)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Invalid(format!(
            "objective is not deterministic ({f0} vs {f1})"
        )));
    }

    params.zero_grads();
    {
        let mut tape = Tape::new(params, Mode::Eval);
        let v = loss_fn(&mut tape)?;
        tape.backward(v)?;
    }

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, j) in entries.resolve(params) {
        let analytic = params.get(id).grad.borrow().data()[j];
        let orig = params.value(id).data()[j];
        params.get_mut(id).value.data_mut()[j] = orig + step;
        let fp = eval(params, &mut loss_fn);
        params.get_mut(id).value.data_mut()[j] = orig - step;
        let fm = eval(params, &mut loss_fn);
        params.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (fp? - fm?) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.get(id).name.clone(), j));
        }
    }
    Ok(report)
}

fn eval<F>(params: &ParamSet, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(params, Mode::Eval);
    let v = loss_fn(&mut tape)?;
    let val = tape.value(v);
    if !val.is_scalar() {
        return Err(Error::Invalid("finite-difference objective is not scalar".into()));
    }
    Ok(val.item())
}
