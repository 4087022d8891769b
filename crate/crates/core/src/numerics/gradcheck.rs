//! Central-difference gradient oracle.

use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tape::{SelectionLog, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradReport {
    fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        let mut report = GradReport {
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
        }
        report
    }

    pub fn merge(&self, other: &GradReport) -> GradReport {
        if other.max_rel_error > self.max_rel_error {
            GradReport {
                max_abs_error: self.max_abs_error.max(other.max_abs_error),
                ..other.clone()
            }
        } else {
            GradReport {
                max_abs_error: self.max_abs_error.max(other.max_abs_error),
                ..self.clone()
            }
        }
    }
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks the reverse-mode gradient of `f` at `params` against central
/// differences with step `h`.
///
/// Any row selections made by `f` on the first evaluation are replayed on
/// every perturbed evaluation, so discrete choices stay frozen.
pub fn grad_check<F>(f: F, params: &Tensor, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(params.clone());
    let out = f(&mut tape, p)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; params.len()]);
    let frozen = tape.into_selections();

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::with_selections(SelectionLog::replaying(frozen.entries().to_vec()));
        let p = tape.leaf(t);
        let out = f(&mut tape, p)?;
        scalar_of(&tape, out)
    };
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[i] += h;
        let mut minus = params.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(GradReport::compare(&analytic, &numeric))
}

/// Gradient check over selected tensors of a parameter store. `f` builds the
/// scalar objective from the store's current values.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
) -> Result<Vec<(ParamId, GradReport)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let frozen = tape.into_selections();

    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_selections(SelectionLog::replaying(frozen.entries().to_vec()));
        let out = f(&mut tape, work)?;
        scalar_of(&tape, out)
    };

    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        reports.push((id, GradReport::compare(&analytic, &numeric)));
    }
    Ok(reports)
}
