//! Finite-difference verification of tape gradients.

use crate::error::{DcaError, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, ValueId};

/// Compare the tape gradient of a scalar function against central finite
/// differences, returning the maximum relative error over all entries of
/// `x`. The closure receives a fresh tape and the id of the input value and
/// must return the id of a 1x1 output.
///
/// Relative error per entry is |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<F>(f: F, x: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    if !(step > 0.0) {
        return Err(DcaError::InvalidParameter(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let mut tape = Tape::new();
    let id = tape.input(x.clone());
    let out = f(&mut tape, id)?;
    if tape.value(out).shape() != (1, 1) {
        return Err(DcaError::InvalidParameter(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    if !tape.scalar(out).is_finite() {
        return Err(DcaError::NonFinite("grad_check function value"));
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(id);

    let eval = |probe: &Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let pid = t.input(probe.clone());
        let oid = f(&mut t, pid)?;
        let v = t.scalar(oid);
        if !v.is_finite() {
            return Err(DcaError::NonFinite("grad_check perturbed value"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + step);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - step);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let rel = (analytic.get(i, j) - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
