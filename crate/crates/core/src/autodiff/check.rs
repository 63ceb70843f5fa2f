use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// (input, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`.
///
/// The relative error of each entry is `|a - n| / max(|a|, |n|, 1e-8)`. A
/// non-finite value on either side fails the check rather than erroring.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_floor(f, inputs, step, tol, 1e-8)
}

/// [`grad_check_many`] with the denominator floor set by the caller. Raise it
/// when some gradients are tiny or exactly zero and round-off in the
/// difference quotient would dominate their relative error.
pub fn grad_check_floor<F>(f: F, inputs: &[Tensor], step: f64, tol: f64, floor: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).and_then(|v| v.item()).unwrap_or(f64::NAN)
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut passed = true;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.values()[j];
            probe[k].values_mut()[j] = orig + step;
            let up = eval(&probe);
            probe[k].values_mut()[j] = orig - step;
            let down = eval(&probe);
            probe[k].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k].values()[j];
            let rel = if numeric.is_finite() && a.is_finite() {
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor)
            } else {
                f64::INFINITY
            };
            if worst.is_none() || rel > max_rel {
                max_rel = rel;
                worst = Some((k, j, a, numeric));
            }
            if !(rel <= tol) {
                passed = false;
            }
        }
    }
    Ok(GradCheckReport {
        passed,
        max_rel_error: max_rel,
        worst,
    })
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, input: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(input), step, tol)
}
