//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values; it never consults the
//! backward rules it is checking.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const STEP: f64 = 1e-5;

/// Denominator floor. Central differences at `STEP` carry roughly 1e-10 of
/// rounding noise on O(10) losses, so gradients below the floor are compared
/// in absolute terms.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares backprop gradients of `loss_fn` against central differences for
/// up to `per_param` evenly spaced entries of every parameter.
pub fn check_params<F>(store: &mut ParamStore, per_param: usize, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = loss_fn(&tape, store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads(store);
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let l = loss_fn(&t, store)?;
        let v = t.value(l).item();
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let stride = (n / per_param.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(per_param) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[idx] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads.get(id).data()[idx];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    param: store.name(id).to_string(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
