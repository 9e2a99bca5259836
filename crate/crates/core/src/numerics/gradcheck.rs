use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{FpedError, Result};

/// Largest relative deviation between the tape gradient of `f` at `theta`
/// and a central difference with step `h`.
///
/// `f` receives a fresh tape and the differentiable leaf holding `theta`
/// and must return a one-element loss. The per-coordinate error is
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Var,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(FpedError::Argument(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(t.clone());
        let y = f(&mut tape, x);
        let v = tape.scalar(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FpedError::Numeric(format!("objective evaluated to {v}")))
        }
    };

    let mut tape = Tape::new();
    let x = tape.input(theta.clone());
    let y = f(&mut tape, x);
    let v = tape.scalar(y);
    if !v.is_finite() {
        return Err(FpedError::Numeric(format!("objective evaluated to {v}")));
    }
    let grads = tape.backward(y);
    let zeros = vec![0.0; theta.len()];
    let analytic = grads.wrt(x).unwrap_or(&zeros).to_vec();
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let base = theta.data()[i];
        probe.data_mut()[i] = base + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = base - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
