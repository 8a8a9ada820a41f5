//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever calls the forward closure, so it stays
//! independent of every backward rule it is used to verify.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used by every finite-difference check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so that gradients that are
/// zero up to round-off do not produce spurious huge ratios.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step [`FD_STEP`]. `skip(input, index)` excludes entries
/// (e.g. those sitting on a max tie).
pub fn check_with<F>(inputs: &[Tensor], f: F, skip: impl Fn(usize, usize) -> bool) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_against(inputs, &f, &f, skip)
}

/// Tape gradient of `f` against central differences of `surrogate`. Used for
/// estimators whose backward rule deliberately differs from the forward
/// function, such as straight-through.
pub fn check_against<F, S>(
    inputs: &[Tensor],
    f: F,
    surrogate: S,
    skip: impl Fn(usize, usize) -> bool,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    S: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let out = out.sum_all();
        let grads = tape.backward(out);
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(surrogate(&tape, &vars)?.sum_all().item())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            if skip(k, i) {
                continue;
            }
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x0 - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_with(inputs, f, |_, _| false)
}
