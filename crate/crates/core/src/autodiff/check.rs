use super::{DualTensor, Tape};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of `f` at `point` against central
/// differences over every coordinate.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, shape: &[usize], point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &DualTensor) -> Result<DualTensor>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, shape, point, &coords, eps)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, shape: &[usize], point: &[f64], coords: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &DualTensor) -> Result<DualTensor>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let x = tape.var(shape.to_vec(), point.to_vec())?;
    let y = f(&tape, &x)?;
    finite("f(x)", y.item())?;
    let analytic = tape.backward(&y)?.wrt(&x);

    let eval = |values: Vec<f64>| -> Result<f64> {
        // constant input: nothing is recorded
        let scratch = Tape::new();
        let x = DualTensor::constant(shape.to_vec(), values)?;
        let v = f(&scratch, &x)?.item();
        finite("f(x ± eps)", v)
    };

    let mut worst = 0.0_f64;
    for &i in coords {
        if i >= point.len() {
            return Err(Error::Contract(format!("coordinate {i} out of range")));
        }
        let mut plus = point.to_vec();
        plus[i] += eps;
        let mut minus = point.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}
