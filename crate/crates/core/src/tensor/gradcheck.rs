//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {} values",
            v.len()
        )));
    }
    if !v[0].is_finite() {
        return Err(Error::Numeric(format!(
            "function value {} is not finite",
            v[0]
        )));
    }
    Ok(v[0])
}

/// Compares the tape's gradient of a scalar `f` against `(f(x+h) - f(x-h)) / 2h`
/// for every coordinate of every input whose `requires_grad` flag is set.
///
/// The relative error of a coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_inputs<F>(name: &str, f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    eval_scalar(&f, inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads
            .wrt(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        #[allow(clippy::needless_range_loop)]
        for c in 0..t.numel() {
            let x0 = t.data()[c];
            probe[k].data_mut()[c] = x0 + h;
            let up = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[c] = x0 - h;
            let down = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * h);
            let abs = (analytic[c] - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(1.0));
        }
    }
    if !(max_rel.is_finite() && max_abs.is_finite()) {
        return Err(Error::Numeric(format!("{name}: non-finite gradient error")));
    }
    Ok(GradReport {
        op_name: name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel < tol,
    })
}

/// Single-input form of [`check_inputs`].
pub fn finite_diff_check<F>(name: &str, f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = x.clone().with_grad();
    check_inputs(name, |t, v| f(t, v[0]), std::slice::from_ref(&x), h, tol)
}
