use super::params::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{GradReport, Tensor, Var};

fn eval<F>(f: &F, stores: &[ParamStore], inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let refs: Vec<&ParamStore> = stores.iter().collect();
    let mut s = Session::inference(&refs);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.input(t)).collect();
    let out = f(&mut s, &vars)?;
    let v = s.tape.value(out);
    if v.len() != 1 || !v[0].is_finite() {
        return Err(Error::Numeric(format!(
            "module check needs a finite scalar, got {v:?}"
        )));
    }
    Ok(v[0])
}

/// Finite-difference check of a parameterized scalar function with respect to
/// every input that requires gradients and every parameter of every store.
pub fn check_module<F>(
    name: &str,
    stores: &[ParamStore],
    inputs: &[Tensor],
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let refs: Vec<&ParamStore> = stores.iter().collect();
    let mut s = Session::new(&refs);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.input(t)).collect();
    let out = f(&mut s, &vars)?;
    let grads = s.tape.backward(out)?;
    let input_grads: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| grads.wrt(v).map(<[f64]>::to_vec))
        .collect();
    let store_grads: Vec<_> = stores
        .iter()
        .map(|st| s.grads(&grads, st.group()))
        .collect();
    drop(s);

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut record = |analytic: f64, numeric: f64| {
        let abs = (analytic - numeric).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / numeric.abs().max(1.0));
    };

    let mut probe_inputs = inputs.to_vec();
    for k in 0..inputs.len() {
        if !inputs[k].requires_grad() {
            continue;
        }
        for c in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[c];
            probe_inputs[k].data_mut()[c] = x0 + h;
            let up = eval(&f, stores, &probe_inputs)?;
            probe_inputs[k].data_mut()[c] = x0 - h;
            let down = eval(&f, stores, &probe_inputs)?;
            probe_inputs[k].data_mut()[c] = x0;
            let a = input_grads[k].as_ref().map_or(0.0, |g| g[c]);
            record(a, (up - down) / (2.0 * h));
        }
    }
    let mut probe = stores.to_vec();
    for (si, st) in stores.iter().enumerate() {
        for p in 0..st.len() {
            for c in 0..st.tensors()[p].numel() {
                let x0 = st.tensors()[p].data()[c];
                probe[si].tensors_mut()[p].data_mut()[c] = x0 + h;
                let up = eval(&f, &probe, inputs)?;
                probe[si].tensors_mut()[p].data_mut()[c] = x0 - h;
                let down = eval(&f, &probe, inputs)?;
                probe[si].tensors_mut()[p].data_mut()[c] = x0;
                let a = store_grads[si].get(p).map_or(0.0, |g| g[c]);
                record(a, (up - down) / (2.0 * h));
            }
        }
    }
    Ok(GradReport {
        op_name: name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel < tol,
    })
}

/// Weighted sum with fixed, position-dependent weights; turns any output into a
/// scalar whose gradient exercises every coordinate differently.
pub fn probe_sum(s: &mut Session, v: Var) -> Result<Var> {
    let n = s.tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let shape = s.tape.shape(v).to_vec();
    let w = s.tape.constant(&shape, w)?;
    let p = s.tape.mul(v, w)?;
    Ok(s.tape.sum_all(p))
}
