//! Central-difference gradient checking against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative discrepancy `|a − n| / max(1, |a|)` between the analytic
/// gradient of `sum(f(x))` and its central finite difference with step `h`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&tape, v)?.sum()?;
        tape.backward(out)?.wrt(v)
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        Ok(f(&tape, v)?.sum()?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
