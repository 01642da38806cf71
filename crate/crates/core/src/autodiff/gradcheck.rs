use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

/// Worst coordinate-wise relative error between reverse-mode gradients and
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `f` receives a fresh tape and the point registered as a trainable leaf,
/// and must return a scalar node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check needs eps > 0");
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    let analytic = tape.backward(loss)?.get_or_zeros(x, point);

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut worst = 0.0_f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
