//! Central finite-difference checks against analytic parameter gradients.

use crate::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` with central differences of `loss` for up to
/// `max_per_param` coordinates of every parameter (evenly strided).
pub fn check_store_gradients(
    store: &ParamStore,
    analytic: &Gradients,
    loss: impl Fn(&ParamStore) -> f64,
    h: f64,
    max_per_param: usize,
) -> GradCheckReport {
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    let mut probe = store.clone();
    for id in store.ids().collect::<Vec<ParamId>>() {
        let n = store.get(id).len();
        let stride = (n / max_per_param.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let fp = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig - h;
            let fm = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id).map(|t| t.data()[k]).unwrap_or(0.0);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    report
}

/// Same check for a plain vector input.
pub fn check_vector_gradient(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let fp = f(&p);
        p[i] = x[i] - h;
        let fm = f(&p);
        p[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    worst
}
