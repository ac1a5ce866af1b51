//! Finite-difference verification of backward rules.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check over one input tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Element attaining the maximum.
    pub worst_index: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(out.item().f64())
}

/// Compares reverse-mode gradients of a scalar function of several inputs
/// against central differences with step `h`. Returns one report per input.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<Vec<GradCheck>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|x| (0..x.len()).collect()).collect();
    check_gradients_at(f, inputs, h, &all)
}

/// As [`check_gradients`], probing only `elements[i]` of input `i`.
pub fn check_gradients_at<T, F>(f: F, inputs: &[Tensor<T>], h: f64, elements: &[Vec<usize>]) -> Result<Vec<GradCheck>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if elements.len() != inputs.len() {
        return Err(Error::dim("check_gradients_at", &[inputs.len()], &[elements.len()]));
    }
    if let Some((i, e)) = elements
        .iter()
        .enumerate()
        .find_map(|(i, es)| es.iter().find(|&&e| e >= inputs[i].len()).map(|&e| (i, e)))
    {
        return Err(Error::Contract(format!("element {e} is outside input {i}")));
    }
    for (i, x) in inputs.iter().enumerate() {
        if let Some(index) = x.first_non_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient check input {i}"),
                index,
            });
        }
    }
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v).clone()).collect()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut report = GradCheck {
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for &e in &elements[i] {
            let orig = probe[i].data()[e];
            let nonfinite = |err: Error| match err {
                Error::NonFinite { op, .. } => Error::NonFinite {
                    op: format!("gradient check of input {i} ({op})"),
                    index: e,
                },
                other => other,
            };
            probe[i].data_mut()[e] = T::of(orig.f64() + h);
            let plus = eval(&f, &probe).map_err(nonfinite)?;
            probe[i].data_mut()[e] = T::of(orig.f64() - h);
            let minus = eval(&f, &probe).map_err(nonfinite)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient check of input {i}"),
                    index: e,
                });
            }
            let err = rel_error(grad.data()[e].f64(), numeric);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst_index: e,
                };
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Single-input form of [`check_gradients`]; returns the maximum relative
/// error over all elements of `x`.
pub fn check_gradient<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let reports = check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(reports[0].max_rel_error)
}
