//! Central-difference gradient oracle.

use thiserror::Error;

use super::{Tape, Tensor, Var};
use crate::error::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// `(parameter index, flat entry index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    /// Entries left out because a perturbation crossed a relu or clamp
    /// kink, where finite differences do not estimate the derivative.
    pub entries_skipped: usize,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step {0} outside (0, 1e-3]")]
    BadStep(f64),
    #[error("function is non-finite when perturbing parameter {param} entry {entry}")]
    NonFinite { param: usize, entry: usize },
    #[error("function evaluation failed: {0}")]
    Eval(#[from] Error),
}

/// Central difference formula used for the numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h²)`.
    TwoPoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h⁴)`.
    /// Allows a larger step, which lowers round-off on small gradients.
    FourPoint,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<bool>), GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_pattern()))
}

/// Compares `backward()` against central differences for every entry of
/// every parameter. The relative error per entry uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. Entries whose perturbations cross a
/// relu or clamp kink are counted in `entries_skipped` instead.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    check_scaled(f, params, step, Stencil::TwoPoint, 1.0)
}

/// As [`finite_diff_check`] with a chosen stencil.
pub fn finite_diff_check_with<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    check_scaled(f, params, step, stencil, 1.0)
}

/// As [`finite_diff_check`], with analytic gradients multiplied by
/// `analytic_scale` before comparison. A scale other than one is a
/// negative control that must make the check fail.
pub(crate) fn check_scaled<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    stencil: Stencil,
    analytic_scale: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(GradCheckError::BadStep(step));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(GradCheckError::NonFinite { param: 0, entry: 0 });
    }
    let grads = tape.backward(out)?;
    let center = tape.branch_pattern();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
        entries_skipped: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            let mut smooth = true;
            let mut at = |offset: f64| -> Result<f64, GradCheckError> {
                work[pi].data_mut()[e] = orig + offset;
                let (v, pattern) = eval(&f, &work)?;
                work[pi].data_mut()[e] = orig;
                smooth &= pattern == center;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(GradCheckError::NonFinite { param: pi, entry: e })
                }
            };
            let near = at(step)? - at(-step)?;
            let numeric = match stencil {
                Stencil::TwoPoint => near / (2.0 * step),
                Stencil::FourPoint => {
                    let far = at(2.0 * step)? - at(-2.0 * step)?;
                    (8.0 * near - far) / (12.0 * step)
                }
            };
            if !smooth {
                report.entries_skipped += 1;
                continue;
            }
            let a = analytic.data()[e] * analytic_scale;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}
