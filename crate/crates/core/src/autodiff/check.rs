use super::tape::{Tape, Var};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from the input node. Returns the
/// worst elementwise relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor2D, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor2D::zeros(x.rows(), x.cols()));

    let eval = |point: Tensor2D| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::shape("gradient_check", "function must return a 1x1 value"))
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
