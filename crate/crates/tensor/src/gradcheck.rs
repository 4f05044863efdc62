//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Components with magnitude below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Maximum over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// where numeric is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// `f` builds a scalar from the input variable on a fresh tape.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_refined(f, x, &[h], 0.0)
}

/// Like [`finite_diff_check`], but a coordinate whose error at `steps[0]`
/// exceeds `tolerance` is retried at the remaining steps and keeps its best
/// error. A central difference whose stencil straddles a ReLU or max-pool
/// switch is wrong by O(1); shrinking the step moves the stencil off the
/// kink while a genuine gradient error persists at every step.
pub fn finite_diff_check_refined<F>(
    f: F,
    x: &Tensor<f64>,
    steps: &[f64],
    tolerance: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if steps.is_empty() {
        return Err(TensorError::invalid("finite_diff_check", "no step sizes"));
    }
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = match tape.backward(out)?.take(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };
    if analytic.len() != x.len() {
        return Err(TensorError::invalid(
            "finite_diff_check",
            "gradient length mismatch",
        ));
    }

    let base = x.to_vec();
    let error_at = |i: usize, a: f64, h: f64| -> Result<f64> {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval(Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        Ok((a - numeric).abs() / denom)
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut best = error_at(i, a, steps[0])?;
        for &h in &steps[1..] {
            if best <= tolerance {
                break;
            }
            best = best.min(error_at(i, a, h)?);
        }
        worst = worst.max(best);
    }
    Ok(worst)
}
