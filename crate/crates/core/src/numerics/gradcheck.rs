use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors. Entries whose analytic and
/// numeric gradients are both smaller than this are compared on an absolute
/// scale, since central differences carry roundoff near `1e-10`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let l = loss_fn(&mut tape)?;
    tape.scalar(l)
}

/// Analytic gradients of `loss_fn` for every parameter in `store`.
pub fn analytic_gradients<F>(
    store: &ParamStore,
    loss_fn: &mut F,
) -> Result<BTreeMap<ParamId, Tensor>>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let l = loss_fn(&mut tape)?;
    Ok(tape.backward(l)?.into_param_map())
}

/// Compares the reverse-mode gradient of `loss_fn` against central
/// differences with step `eps` over every entry of `params`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss_fn)?;
    compare_gradients(store, params, eps, &analytic, loss_fn)
}

/// Like [`grad_check`] but probes at most `per_param` evenly spaced entries
/// of each parameter.
pub fn grad_check_sampled<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    per_param: usize,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss_fn)?;
    compare_entries(store, params, eps, &analytic, Some(per_param), loss_fn)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients
/// (missing entries count as zero).
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    analytic: &BTreeMap<ParamId, Tensor>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    compare_entries(store, params, eps, analytic, None, loss_fn)
}

/// Like [`compare_gradients`] but probes at most `per_param` evenly spaced
/// entries of each parameter.
pub fn compare_gradients_sampled<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    analytic: &BTreeMap<ParamId, Tensor>,
    per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    compare_entries(store, params, eps, analytic, Some(per_param), loss_fn)
}

fn compare_entries<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    analytic: &BTreeMap<ParamId, Tensor>,
    per_param: Option<usize>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let first = eval_loss(store, &mut loss_fn)?;
    let second = eval_loss(store, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries: 0,
    };
    for &id in params {
        let len = store.get(id).len();
        let n = per_param.map_or(len, |p| p.min(len));
        for k in (0..n).map(|i| i * len / n) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval_loss(store, &mut loss_fn);
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval_loss(store, &mut loss_fn);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[k]);
            let abs = libm::fabs(a - numeric);
            let rel = abs / libm::fabs(a).max(libm::fabs(numeric)).max(GRAD_CHECK_FLOOR);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
