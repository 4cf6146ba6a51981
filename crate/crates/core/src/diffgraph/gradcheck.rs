//! Central finite-difference checks against reverse-mode gradients.
//!
//! Only forward evaluations are used on the numeric side, so the check is
//! independent of every backward rule it verifies.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::Result;

/// Magnitude below which differences are judged absolutely rather than
/// relatively.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` with step
/// `step`, perturbing every entry (or every `stride`-th entry of large
/// tensors when `max_per_tensor` is set).
pub fn check_params<F>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    max_per_tensor: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name).map_or(0, Tensor::len);
        let stride = match max_per_tensor {
            Some(m) if n > m => n.div_ceil(m),
            _ => 1,
        };
        let zero = Tensor::zeros(store.get(&name).expect("present").shape());
        let a = analytic.get(&name).unwrap_or(&zero);
        for i in (0..n).step_by(stride) {
            let orig = store.get(&name).expect("present").data()[i];
            probe.get_mut(&name).expect("present").data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_error(a.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!(
                    "{name}[{i}]: analytic {} vs numeric {numeric}",
                    a.data()[i]
                );
            }
        }
    }
    Ok(report)
}
