//! Finite-difference verification of tape gradients.

use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function that can be evaluated at any precision.
///
/// The analytic gradient is taken at the precision under test while the
/// central differences are always evaluated in `f64`, so the numeric oracle
/// only shares the forward definition with the code being checked.
pub trait ScalarFunction {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var>;
}

fn value_at<F: ScalarFunction>(f: &F, point: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(point.clone())?;
    let y = f.eval(&mut tape, x)?;
    tape.value(y)
        .item()
        .ok_or_else(|| Error::invalid("grad_check needs a scalar-valued function"))
}

/// Relative size below which a gradient coordinate is compared against the
/// gradient's overall scale instead of its own magnitude.
pub const FLOOR: f64 = 1e-3;

/// Max relative error between the analytic gradient (precision `T`) and
/// central differences with step `h`, over all coordinates of `point`.
pub fn grad_check<T: Float, F: ScalarFunction>(f: &F, point: &Tensor<f64>, h: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords::<T, F>(f, point, h, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
///
/// The numeric derivative is the central difference at step `h` refined by
/// one Richardson step with `h/2`, i.e. `(4·D(h/2) − D(h)) / 3`, which keeps
/// the truncation error at O(h⁴) so that small gradient coordinates are not
/// swamped by the differencing error. The relative error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, FLOOR · g)`, where `g`
/// is the largest numeric gradient magnitude over the checked coordinates
/// (at least 1e-5): coordinates a thousand times smaller than the gradient
/// are judged against that scale, since rounding in the forward pass alone
/// perturbs them by more than the tolerance.
pub fn grad_check_coords<T: Float, F: ScalarFunction>(
    f: &F,
    point: &Tensor<f64>,
    h: f64,
    coords: &[usize],
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= point.numel()) {
        return Err(Error::invalid(format!("coordinate {bad} out of range")));
    }

    let mut tape = Tape::<T>::new();
    let x = tape.param(point.cast::<T>())?;
    let y = f.eval(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get(x);

    let mut probe = point.clone();
    let mut numeric = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut central = |step: f64| -> Result<f64> {
            let orig = probe.data()[c];
            probe.data_mut()[c] = orig + step;
            let up = value_at(f, &probe)?;
            probe.data_mut()[c] = orig - step;
            let down = value_at(f, &probe)?;
            probe.data_mut()[c] = orig;
            Ok((up - down) / (2.0 * step))
        };
        let coarse = central(h)?;
        let fine = central(h / 2.0)?;
        numeric.push((4.0 * fine - coarse) / 3.0);
    }
    let scale = numeric.iter().fold(1e-5f64, |m, n| m.max(n.abs()));
    let mut worst = 0.0f64;
    for (&c, &n) in coords.iter().zip(&numeric) {
        let a = analytic.data()[c].as_f64();
        let denom = a.abs().max(n.abs()).max(FLOOR * scale);
        worst = worst.max((a - n).abs() / denom);
    }
    Ok(worst)
}
