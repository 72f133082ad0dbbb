//! Central finite-difference checks of analytic gradients, using the
//! fourth-order five-point stencil.

use super::graph::{Graph, Var};
use super::param::{Gradients, ParamSet};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |numeric|)` seen.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) over {} coords; worst {}[{}] analytic {:.6e} numeric {:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.coords_checked,
            self.worst_param,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

fn sampled(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let stride = len as f64 / max_coords as f64;
    (0..max_coords).map(|k| (k as f64 * stride) as usize).collect()
}

/// Builds the loss on a fresh graph, differentiates it, and compares against
/// central differences for up to `max_coords` entries of each parameter.
pub fn grad_check<F>(
    params: &ParamSet,
    build: F,
    eps: f64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        g.backward(loss)?
    };
    let loss_of = |ps: &ParamSet| {
        let mut g = Graph::new(ps);
        let loss = build(&mut g);
        g.value(loss).item()
    };
    Ok(compare_gradients(params, loss_of, &analytic, eps, tol, max_coords))
}

/// Compares given analytic gradients with central differences of `loss`.
pub fn compare_gradients<L>(
    params: &ParamSet,
    loss: L,
    analytic: &Gradients,
    eps: f64,
    tol: f64,
    max_coords: usize,
) -> GradCheckReport
where
    L: Fn(&ParamSet) -> f64,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        tol,
        passed: true,
    };
    for id in params.ids() {
        let p = params.get(id);
        for i in sampled(p.value.len(), max_coords) {
            let orig = p.value.data()[i];
            let mut at = |delta: f64| {
                work.get_mut(id).value.data_mut()[i] = orig + delta;
                loss(&work)
            };
            let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
            work.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (exact - numeric).abs() / numeric.abs().max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst_param = p.name.clone();
                report.worst_index = i;
                report.worst_analytic = exact;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    report
}
