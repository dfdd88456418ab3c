//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Relative error `max|a−n| / max(max|a|, max|n|)` in the infinity norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences `(f(x+h·e) − f(x−h·e)) / 2h` for every coordinate of every input.
pub fn numeric_gradients<T, F>(f: &F, inputs: &[Tensor<T>], h: f64) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().f64())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = T::of(orig.f64() + h);
            let plus = eval(&work)?;
            work[k].data_mut()[i] = T::of(orig.f64() - h);
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Gradients from one backward pass, one vector per input.
pub fn analytic_gradients<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.get(v) {
            Some(g) => g.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// Per-input relative error between backward and central differences.
pub fn check_inputs<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, h)?;
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| relative_error(a, n)).collect())
}

/// Largest relative error of `f` at `x` over all coordinates.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let errs = check_inputs(|t: &mut Tape<T>, v: &[Var]| f(t, v[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}
