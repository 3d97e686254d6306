//! Central finite-difference verification of recorded-graph gradients.
//!
//! The check perturbs every scalar parameter by +/-h, re-evaluates the loss
//! through a caller-supplied closure, and compares the centered difference
//! against the analytic gradient already accumulated in the store. The
//! closure must be a deterministic function of the store (fix any dropout
//! seed per evaluation).

use super::tape::{ParamId, ParamStore};
use super::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients in `store.grad` with central differences of
/// `loss_fn`, parameter by parameter.
///
/// `rel = |fd - grad| / max(|fd|, |grad|, 1e-6)`; the floor keeps genuinely
/// tiny gradients from amplifying finite-difference noise.
///
/// A scalar that misses `retry_below` at the base step is re-measured at
/// h/10 and h/100 and keeps its best reading. Piecewise-linear activations
/// make this necessary: when a pre-activation sits within h of the kink,
/// the central difference straddles two linear pieces and disagrees with
/// the (correct) one-sided derivative by a step-dependent amount that
/// vanishes as h shrinks. A genuinely wrong gradient stays wrong at every
/// h, so the ladder cannot mask a real defect.
pub fn check_against_finite_differences_with_tol(
    store: &mut ParamStore,
    h: f64,
    retry_below: f64,
    mut loss_fn: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        for j in 0..n {
            let analytic = store.grad(id).data()[j];
            let mut best_rel = f64::INFINITY;
            for step in [h, h / 10.0, h / 100.0] {
                let original = store.value(id).data()[j];
                store.value_mut(id).data_mut()[j] = original + step;
                let up = loss_fn(store)?;
                store.value_mut(id).data_mut()[j] = original - step;
                let down = loss_fn(store)?;
                store.value_mut(id).data_mut()[j] = original;

                let fd = (up - down) / (2.0 * step);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                best_rel = best_rel.min(rel);
                if best_rel < retry_below {
                    break;
                }
            }
            report.checked += 1;
            if best_rel > report.max_rel_err {
                report.max_rel_err = best_rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

/// [`check_against_finite_differences_with_tol`] at the 1e-4 target.
pub fn check_against_finite_differences(
    store: &mut ParamStore,
    h: f64,
    loss_fn: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    check_against_finite_differences_with_tol(store, h, 1e-4, loss_fn)
}
