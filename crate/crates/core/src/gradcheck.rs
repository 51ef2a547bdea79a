//! Central finite-difference check of tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

fn eval<F>(f: &F, x: &Tensor) -> Result<Real>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.value(out).item().ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))?;
    if !val.is_finite() {
        return Err(Error::NonFinite(format!("function value {}", val)));
    }
    Ok(val)
}

/// Analytic gradient of the scalar function `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let mut grads = tape.backward(out)?;
    let g = grads.take(v).expect("tracked leaf always has a gradient");
    if !g.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    Ok(g)
}

/// Maximum over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: Real) -> Result<Real>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, eps, &coords)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, eps: Real, coords: &[usize]) -> Result<Real>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", eps)));
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut worst: Real = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Relative error between two already-computed gradients using the same
/// normalisation as [`finite_difference_check`].
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}
