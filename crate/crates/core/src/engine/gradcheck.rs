use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default absolute floor of the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Worst relative error between the tape gradient of `f` at `x` and central
/// differences `(f(x+εe) − f(x−εe)) / 2ε`, using `max(|a|, |n|, floor)` as
/// the denominator.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with_floor(f, x, eps, GRAD_CHECK_FLOOR)
}

pub fn grad_check_with_floor<F>(f: F, x: &Tensor<f64>, eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
