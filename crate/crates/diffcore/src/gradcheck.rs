//! Central finite-difference checks against [`Tape::backward`].

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Probes dropped because the loss has a kink within `±h`.
    pub skipped: usize,
}

/// Compares analytic gradients of `loss` with central differences of step
/// `h`, probing at most `per_param` evenly spaced entries of each parameter.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients<F>(params: &ParamStore, h: f64, per_param: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    run(params, h, per_param, None, loss)
}

/// Like [`check_gradients`], for losses built from ReLU or max: a probe is
/// skipped when the central differences at `h` and `h/2` disagree by more
/// than `kink_tol` (relative), i.e. a non-differentiable point lies within
/// the step. For smooth losses the two agree to `O(h²)`, so a wrong
/// analytic gradient is still caught.
pub fn check_piecewise_gradients<F>(
    params: &ParamStore,
    h: f64,
    per_param: usize,
    kink_tol: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    run(params, h, per_param, Some(kink_tol), loss)
}

fn run<F>(params: &ParamStore, h: f64, per_param: usize, kink_tol: Option<f64>, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = loss(&mut tape, params)?;
    let grads = tape.backward(root)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = loss(&mut t, p)?;
        Ok(t.value(r).item())
    };
    for id in params.ids() {
        let n = params.get(id).numel();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_param) {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            if let Some(tol) = kink_tol {
                work.get_mut(id).data_mut()[j] = orig + h / 2.0;
                let half_up = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig - h / 2.0;
                let half_down = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig;
                let half = (half_up - half_down) / h;
                if (numeric - half).abs() > tol * numeric.abs().max(half.abs()).max(1e-6) {
                    report.skipped += 1;
                    continue;
                }
            }
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
