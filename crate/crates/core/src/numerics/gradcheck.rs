//! Central finite-difference checks for tape gradients.
//!
//! Perturbed evaluations replay the stop-gradient values of the unperturbed
//! pass, so the numerical derivative is of the same function `backward`
//! differentiates.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor in [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a fresh tape.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::recording_stops();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let stops = tape.take_stop_values();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::replaying_stops(stops.clone());
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *v);
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            report.record(i, e, analytic.data()[e], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a loss computed from a [`ParamStore`].
///
/// `targets` lists `(param, element)` pairs to perturb; embedding rows are
/// compared against the sparse row gradients.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    targets: &[(ParamId, usize)],
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::recording_stops();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let stops = tape.take_stop_values();

    let analytic = |pid: ParamId, elem: usize| -> f64 {
        if let Some(g) = grads.dense(pid) {
            return g.data()[elem];
        }
        if let Some(rows) = grads.sparse(pid) {
            let width = store.value(pid).shape().last().copied().unwrap_or(1);
            if let Some(r) = rows.get(&(elem / width)) {
                return r[elem % width];
            }
        }
        0.0
    };
    let expected: Vec<f64> = targets.iter().map(|&(p, e)| analytic(p, e)).collect();

    let mut report = GradCheckReport::default();
    for (&(pid, elem), a) in targets.iter().zip(expected) {
        let orig = store.value(pid).data()[elem];
        let mut eval = |x: f64| -> Result<f64> {
            store.value_mut(pid).data_mut()[elem] = x;
            let mut t = Tape::replaying_stops(stops.clone());
            let out = f(&mut t, store)?;
            Ok(t.value(out).item())
        };
        let plus = eval(orig + step)?;
        let minus = eval(orig - step)?;
        store.value_mut(pid).data_mut()[elem] = orig;
        report.record(pid, elem, a, (plus - minus) / (2.0 * step));
    }
    Ok(report)
}
